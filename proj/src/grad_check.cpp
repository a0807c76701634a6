#include "muse/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "muse/errors.hpp"

namespace muse {

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& loss_fn, const ParamList<T>& params,
                           const GradCheckOptions& opt) {
  for (const auto& p : params) {
    if (!p.value.is_leaf()) throw GraphError("grad_check: parameter " + p.name + " is not a leaf");
    Tensor<T>(p.value).zero_grad();
  }
  auto loss = loss_fn();
  loss.backward();

  // (param, index) pairs to probe.
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  const std::size_t total = count_scalars(params);
  if (opt.max_samples == 0 || total <= opt.max_samples) {
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].value.numel(); ++i) probes.emplace_back(k, i);
  } else {
    Rng rng(opt.seed);
    std::vector<std::size_t> picks;
    while (picks.size() < opt.max_samples) {
      const std::size_t flat = rng.below(total);
      if (std::find(picks.begin(), picks.end(), flat) == picks.end()) picks.push_back(flat);
    }
    std::sort(picks.begin(), picks.end());
    std::size_t k = 0, base = 0;
    for (auto flat : picks) {
      while (flat >= base + params[k].value.numel()) base += params[k++].value.numel();
      probes.emplace_back(k, flat - base);
    }
  }

  auto eval = [&] {
    NoGradGuard guard;
    const double v = static_cast<double>(loss_fn().item());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  GradCheckReport report;
  const double f0 = eval();
  for (auto [k, i] : probes) {
    Tensor<T> p = params[k].value;
    auto data = p.mutable_data();
    const T saved = data[i];
    const double h = opt.eps;
    data[i] = static_cast<T>(saved + h);
    const double fp = eval();
    data[i] = static_cast<T>(saved - h);
    const double fm = eval();
    data[i] = saved;

    GradCheckEntry e;
    e.param = params[k].name;
    e.index = i;
    e.analytic = p.has_grad() ? static_cast<double>(p.grad()[i]) : 0.0;
    e.numeric = (fp - fm) / (2 * h);
    const double right = (fp - f0) / h, left = (f0 - fm) / h;
    const double slope_scale = std::max({std::abs(right), std::abs(left), opt.abs_floor});
    e.kink = std::abs(right - left) > opt.kink_rel * slope_scale &&
             std::abs(right - left) > 10 * opt.abs_floor;
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), opt.abs_floor});
    e.rel_err = std::abs(e.analytic - e.numeric) / denom;
    if (e.kink) {
      ++report.kinks;
    } else {
      ++report.checked;
      if (e.rel_err >= report.max_rel_err) {
        report.max_rel_err = e.rel_err;
        report.worst = e;
      }
    }
    report.entries.push_back(std::move(e));
  }
  report.passed = report.checked > 0 && report.max_rel_err < opt.tol &&
                  static_cast<double>(report.kinks) <=
                      opt.max_kink_fraction * static_cast<double>(report.entries.size());
  return report;
}

template GradCheckReport grad_check(const std::function<Tensor<float>()>&,
                                    const ParamList<float>&, const GradCheckOptions&);
template GradCheckReport grad_check(const std::function<Tensor<double>()>&,
                                    const ParamList<double>&, const GradCheckOptions&);

}  // namespace muse
