#include "avrl/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "avrl/errors.hpp"

namespace avrl {

namespace {
std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix(base);
  for (auto p : parts) h = splitmix(h ^ splitmix(p + 0x632BE59BD9B4E019ULL));
  return h;
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::vector<double> softmax_stable(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax_stable: empty input");
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax_stable: non-finite logit");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    s += out[i];
  }
  for (auto& v : out) v /= s;
  return out;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch " + std::to_string(u.size()) +
                                " vs " + std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  const double denom = std::max(std::sqrt(nu), kCosineEps) * std::max(std::sqrt(nv), kCosineEps);
  return std::clamp(dot / denom, -1.0, 1.0);
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

GradCheckReport grad_check(const std::function<Var()>& loss_fn, ParameterSet& params,
                           const GradCheckOptions& options) {
  auto eval = [&] {
    Var l = loss_fn();
    if (l.value().size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    return l.value()[0];
  };

  params.zero_grad();
  Var loss = loss_fn();
  backward(loss);
  const double base = loss.value()[0];
  if (eval() != base) throw NumericError("grad_check: loss function is not deterministic");

  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  for (auto& [path, entry] : params) {
    if (!entry.trainable) continue;
    Tensor analytic = entry.var.grad();
    Tensor& value = entry.var.mutable_value();
    if (analytic.empty()) analytic = Tensor(value.shape(), 0.0);

    std::vector<std::size_t> elems(value.size());
    std::iota(elems.begin(), elems.end(), 0);
    if (options.max_elements_per_param > 0 && elems.size() > options.max_elements_per_param) {
      std::shuffle(elems.begin(), elems.end(), rng);
      elems.resize(options.max_elements_per_param);
      std::sort(elems.begin(), elems.end());
    }

    GradCheckEntry e;
    e.path = path;
    for (auto i : elems) {
      const double orig = value[i];
      value[i] = orig + options.step;
      const double fp = eval();
      value[i] = orig - options.step;
      const double fm = eval();
      value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.step);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denom_floor});
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      e.max_rel_error = std::max(e.max_rel_error, abs_err / denom);
      ++e.checked;
    }
    report.entries.push_back(std::move(e));
  }
  params.zero_grad();
  return report;
}

}  // namespace avrl
