#include "microdet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "microdet/ops.hpp"

namespace microdet {

namespace {

std::string leaf_label(const GradCase& c, std::size_t i) {
  std::string name = i < c.names.size() ? c.names[i] : "leaf[" + std::to_string(i) + "]";
  return name + " " + shape_str(c.leaves[i].shape());
}

double evaluate(GradCase& c, int probe, const std::string& where) {
  NoGradGuard guard;
  const Tensor<double> l = c.loss(probe);
  const double v = l.item();
  if (!std::isfinite(v)) throw FormatError("grad_check: non-finite loss " + where);
  return v;
}

}  // namespace

Tensor<double> random_normal(const Shape& shape, Rng& rng, double scale) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

Tensor<double> random_projection(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> r = random_normal(y.shape(), rng);
  return sum(mul(y, r));
}

namespace {

// analytic[probe][leaf][coordinate]
using Analytic = std::vector<std::vector<std::vector<double>>>;

Analytic analytic_gradients(GradCase& c) {
  if (!c.loss) throw ConfigError("grad_check: case has no loss closure");
  if (c.probes < 1) throw ConfigError("grad_check: probes must be >= 1");
  Analytic analytic(static_cast<std::size_t>(c.probes));
  for (int k = 0; k < c.probes; ++k) {
    for (auto& leaf : c.leaves) {
      leaf.set_requires_grad(true);
      leaf.zero_grad();
    }
    const Tensor<double> l = c.loss(k);
    if (!std::isfinite(l.item())) throw FormatError("grad_check: non-finite loss at the base point");
    backward(l);
    for (auto& leaf : c.leaves) {
      std::vector<double> g(static_cast<std::size_t>(leaf.numel()), 0.0);
      if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), g.begin());
      analytic[static_cast<std::size_t>(k)].push_back(std::move(g));
    }
  }
  return analytic;
}

int best_probe(const Analytic& analytic, std::size_t leaf, std::size_t j) {
  int probe = 0;
  for (std::size_t k = 1; k < analytic.size(); ++k)
    if (std::abs(analytic[k][leaf][j]) > std::abs(analytic[static_cast<std::size_t>(probe)][leaf][j]))
      probe = static_cast<int>(k);
  return probe;
}

bool on_plateau(const Analytic& analytic, double floor) {
  if (!(floor > 0)) return false;
  for (std::size_t i = 0; i < analytic[0].size(); ++i)
    for (std::size_t j = 0; j < analytic[0][i].size(); ++j) {
      const double a = std::abs(analytic[static_cast<std::size_t>(best_probe(analytic, i, j))][i][j]);
      if (a > 0 && a < floor) return true;
    }
  return false;
}

GradCheckReport compare(GradCase& c, const Analytic& analytic, const GradCheckOptions& opt) {
  GradCheckReport rep;
  for (std::size_t i = 0; i < c.leaves.size(); ++i) {
    Tensor<double>& leaf = c.leaves[i];
    auto data = leaf.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const auto at = [&] { return leaf_label(c, i) + " at flat index " + std::to_string(j); };
      const int probe = best_probe(analytic, i, j);
      const double a = analytic[static_cast<std::size_t>(probe)][i][j];
      if (!std::isfinite(a)) throw FormatError("grad_check: non-finite analytic gradient in " + at());
      const double orig = data[j];
      data[j] = orig + opt.eps;
      const double fp = evaluate(c, probe, "(+eps) in " + at());
      data[j] = orig - opt.eps;
      const double fm = evaluate(c, probe, "(-eps) in " + at());
      data[j] = orig;
      const double n = (fp - fm) / (2.0 * opt.eps);
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
      ++rep.coordinates;
      if (rel > rep.max_rel_error || rep.worst.empty()) {
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
        std::ostringstream os;
        os.precision(6);
        os << at() << ": analytic " << a << ", numeric " << n;
        rep.worst = os.str();
      }
    }
  }
  return rep;
}

}  // namespace

GradCheckReport grad_check(GradCase& c, const GradCheckOptions& opt) {
  const Analytic analytic = analytic_gradients(c);
  return compare(c, analytic, opt);
}

GradCheckReport grad_check(const GradCaseFactory& factory, std::uint64_t seed, const GradCheckOptions& opt) {
  for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(attempt)));
    GradCase c = factory(rng);
    double margin;
    {
      KinkProbe probe;
      NoGradGuard guard;
      for (int k = 0; k < c.probes; ++k) (void)c.loss(k);
      margin = probe.min_distance();
    }
    if (margin < opt.kink_factor * opt.eps) continue;
    const Analytic analytic = analytic_gradients(c);
    if (on_plateau(analytic, opt.plateau_floor)) continue;
    GradCheckReport rep = compare(c, analytic, opt);
    rep.attempts = attempt + 1;
    return rep;
  }
  throw StateError("grad_check: no kink- and plateau-free sample within " + std::to_string(opt.max_attempts) + " attempts");
}

GradCheckReport grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                           const std::vector<Shape>& shapes, std::uint64_t seed, const GradCheckOptions& opt) {
  auto factory = [&](Rng& rng) {
    GradCase c;
    for (const auto& s : shapes) c.leaves.push_back(random_normal(s, rng));
    c.loss = [&fn, leaves = c.leaves](int) { return fn(leaves); };
    return c;
  };
  return grad_check(factory, seed, opt);
}

}  // namespace microdet
