#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "reflgrad/ad.hpp"
#include "reflgrad/errors.hpp"
#include "reflgrad/kernel.hpp"
#include "reflgrad/slab.hpp"

namespace reflgrad {

// One measured reflectivity dataset.  dq holds per-point FWHM resolution and
// stays empty unless the dataset uses pointwise smearing.
struct curve {
  std::vector<double> q, r, sigma_r;
  std::vector<double> dq;
};

inline void validate_curve(const curve& c, const std::string& name) {
  if (c.q.empty()) throw data_error("dataset '" + name + "' has no points");
  if (c.r.size() != c.q.size() || c.sigma_r.size() != c.q.size())
    throw data_error("dataset '" + name + "' has mismatched column lengths");
  if (!c.dq.empty() && c.dq.size() != c.q.size())
    throw data_error("dataset '" + name + "' has a partial resolution column");
  for (std::size_t j = 0; j < c.q.size(); ++j) {
    if (!std::isfinite(c.q[j]) || !std::isfinite(c.r[j]) || !std::isfinite(c.sigma_r[j]))
      throw data_error("dataset '" + name + "' has a non-finite value at row " +
                       std::to_string(j + 1));
    if (!(c.q[j] > 0.0))
      throw data_error("dataset '" + name + "' needs positive q at row " +
                       std::to_string(j + 1));
    if (!(c.sigma_r[j] > 0.0))
      throw data_error("dataset '" + name + "' needs positive uncertainty at row " +
                       std::to_string(j + 1));
    if (!c.dq.empty() && !(c.dq[j] >= 0.0))
      throw data_error("dataset '" + name + "' needs non-negative dq at row " +
                       std::to_string(j + 1));
  }
}

// Couples a model specification to one curve per dataset.
class fit_problem {
 public:
  fit_problem(model_spec spec, std::vector<curve> data)
      : spec_(std::move(spec)), data_(std::move(data)) {
    if (data_.size() != spec_.dataset_count())
      throw config_error("model has " + std::to_string(spec_.dataset_count()) +
                         " datasets but " + std::to_string(data_.size()) +
                         " curves were supplied");
    double acc = 0.0;
    for (std::size_t d = 0; d < data_.size(); ++d) {
      const dataset_def& def = spec_.datasets()[d];
      validate_curve(data_[d], def.name);
      if (def.smear == smear_mode::pointwise && data_[d].dq.empty())
        throw config_error("dataset '" + def.name +
                           "' uses pointwise smearing but the curve has no dq column");
      npoints_ += data_[d].q.size();
      for (double s : data_[d].sigma_r)
        acc += std::log(2.0 * 3.141592653589793238462643 * s * s);
    }
    loglik_const_ = -0.5 * acc;
  }

  const model_spec& spec() const { return spec_; }
  const std::vector<curve>& data() const { return data_; }
  std::size_t dim() const { return spec_.free_count(); }
  std::size_t npoints() const { return npoints_; }
  // additive constant of the Gaussian log likelihood
  double loglik_const() const { return loglik_const_; }

 private:
  model_spec spec_;
  std::vector<curve> data_;
  std::size_t npoints_ = 0;
  double loglik_const_ = 0.0;
};

// Model curves for every dataset at the given free-parameter values.
template <class T>
std::vector<std::vector<T>> predict(const fit_problem& fp, std::span<const T> x) {
  auto params = fp.spec().unpack<T>(x);
  std::vector<std::vector<T>> out;
  out.reserve(fp.data().size());
  for (std::size_t d = 0; d < fp.data().size(); ++d) {
    const curve& c = fp.data()[d];
    out.push_back(reflectivity(params[d].slab, std::span<const double>(c.q),
                               fp.spec().datasets()[d].smear, params[d].smear_pct,
                               std::span<const double>(c.dq)));
  }
  return out;
}

template <class T>
T chi2(const fit_problem& fp, std::span<const T> x) {
  auto params = fp.spec().unpack<T>(x);
  T acc(0.0);
  for (std::size_t d = 0; d < fp.data().size(); ++d) {
    const curve& c = fp.data()[d];
    auto model = reflectivity(params[d].slab, std::span<const double>(c.q),
                              fp.spec().datasets()[d].smear, params[d].smear_pct,
                              std::span<const double>(c.dq));
    for (std::size_t j = 0; j < c.q.size(); ++j) {
      T resid = (model[j] - c.r[j]) / c.sigma_r[j];
      acc += resid * resid;
    }
  }
  return acc;
}

inline double normalized_chi2(const fit_problem& fp, std::span<const double> x) {
  return chi2<double>(fp, x) / static_cast<double>(fp.npoints());
}

// chi-squared and its full gradient in one pass through the hand-written
// adjoint of the reflectivity kernel.  Several times cheaper than taping the
// kernel internals; the taped path (chi2<ad::var>) stays as the reference.
inline double chi2_value_grad(const fit_problem& fp, std::span<const double> x,
                              std::span<double> grad) {
  const model_spec& spec = fp.spec();
  if (grad.size() != spec.free_count())
    throw config_error("gradient buffer has " + std::to_string(grad.size()) +
                       " entries, model has " + std::to_string(spec.free_count()));
  auto params = spec.unpack<double>(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  double total = 0.0;

  const smear_rule& rule = gaussian_smear_rule();
  // d(position k)/d(smear_pct) = q * pos_per_pct * rule.x[k]
  const double pos_per_pct = smear_half_width_sigmas * 0.01 / fwhm_to_sigma;

  thread_local std::vector<kernel_point_workspace> wss;
  thread_local kernel_point_adjoint adj;
  if (wss.size() < static_cast<std::size_t>(smear_points))
    wss.resize(smear_points);
  std::array<double, smear_points> raws{};

  for (std::size_t d = 0; d < fp.data().size(); ++d) {
    const curve& c = fp.data()[d];
    const model_spec::dataset_layout& lay = spec.layouts()[d];
    const slab_params<double>& P = params[d].slab;
    validate(P);
    std::vector<double> contrast = detail::sld_contrast(P);
    std::span<const double> cs(contrast);
    adj.reset(P);
    double d_scale = 0.0, d_bkg = 0.0, d_pct = 0.0;
    const double pct = params[d].smear_pct;
    smear_mode mode = spec.datasets()[d].smear;
    if (mode == smear_mode::constant) {
      if (pct < 0.0) throw config_error("resolution percentage must be non-negative");
      if (pct == 0.0) mode = smear_mode::none;
    }

    for (std::size_t j = 0; j < c.q.size(); ++j) {
      const double qj = c.q[j];
      detail::require_positive_q(qj);
      const double inv_var = 1.0 / (c.sigma_r[j] * c.sigma_r[j]);

      double s_over_q = 0.0;
      bool smeared = false;
      if (mode == smear_mode::constant) {
        s_over_q = pct * (0.01 / fwhm_to_sigma);
        smeared = true;
      } else if (mode == smear_mode::pointwise) {
        if (!(c.dq[j] >= 0.0))
          throw data_error("per-point resolution must be non-negative");
        if (c.dq[j] > 0.0) {
          s_over_q = c.dq[j] / fwhm_to_sigma / qj;
          smeared = true;
        }
      }

      if (!smeared) {
        double raw = detail::abeles_point_fwd(P, cs, qj, wss[0]);
        double model = P.scale * raw + P.bkg;
        double resid = model - c.r[j];
        total += resid * resid * inv_var;
        double w = 2.0 * resid * inv_var;
        d_scale += w * raw;
        d_bkg += w;
        detail::abeles_point_bwd(P, qj, wss[0], w * P.scale, adj, false);
        continue;
      }

      double smeared_raw = 0.0;
      for (int k = 0; k < smear_points; ++k) {
        double qk = qj * (1.0 + s_over_q * (smear_half_width_sigmas * rule.x[k]));
        if (!(qk > 0.0))
          throw data_error("resolution kernel reaches non-positive q at q=" +
                           std::to_string(qj));
        raws[k] = detail::abeles_point_fwd(P, cs, qk, wss[static_cast<std::size_t>(k)]);
        smeared_raw += rule.w[k] * raws[k];
      }
      double model = P.scale * smeared_raw + P.bkg;
      double resid = model - c.r[j];
      total += resid * resid * inv_var;
      double w = 2.0 * resid * inv_var;
      d_scale += w * smeared_raw;
      d_bkg += w;
      const bool want_dq = mode == smear_mode::constant && lay.pct >= 0;
      for (int k = 0; k < smear_points; ++k) {
        double qk = qj * (1.0 + s_over_q * (smear_half_width_sigmas * rule.x[k]));
        double before = adj.d_q;
        detail::abeles_point_bwd(P, qk, wss[static_cast<std::size_t>(k)],
                                 w * P.scale * rule.w[k], adj, want_dq);
        if (want_dq) d_pct += (adj.d_q - before) * qj * pos_per_pct * rule.x[k];
      }
    }

    for (std::size_t i = 0; i < lay.thick.size(); ++i)
      if (lay.thick[i] >= 0) grad[static_cast<std::size_t>(lay.thick[i])] += adj.d_thick[i];
    for (std::size_t i = 0; i < lay.sld.size(); ++i)
      if (lay.sld[i] >= 0) grad[static_cast<std::size_t>(lay.sld[i])] += adj.d_sld[i];
    for (std::size_t i = 0; i < lay.rough.size(); ++i)
      if (lay.rough[i] >= 0) grad[static_cast<std::size_t>(lay.rough[i])] += adj.d_rough[i];
    if (lay.scale >= 0) grad[static_cast<std::size_t>(lay.scale)] += d_scale;
    if (lay.bkg >= 0) grad[static_cast<std::size_t>(lay.bkg)] += d_bkg;
    if (lay.pct >= 0) grad[static_cast<std::size_t>(lay.pct)] += d_pct;
  }
  return total;
}

// chi-squared as a single tape node whose parent weights come from the fused
// adjoint; x entries that are tape constants simply drop out.
inline ad::var chi2_fused(const fit_problem& fp, std::span<const ad::var> x) {
  std::vector<double> xv(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xv[i] = x[i].val();
  std::vector<double> g(x.size());
  double value = chi2_value_grad(fp, xv, g);
  std::vector<std::int32_t> parents;
  std::vector<double> weights;
  parents.reserve(x.size());
  weights.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].index() < 0) continue;
    parents.push_back(x[i].index());
    weights.push_back(g[i]);
  }
  return ad::kary_var(value, parents, weights);
}

template <class T>
T log_likelihood(const fit_problem& fp, std::span<const T> x) {
  if constexpr (std::is_same_v<T, ad::var>)
    return chi2_fused(fp, x) * -0.5 + fp.loglik_const();
  else
    return chi2<T>(fp, x) * -0.5 + fp.loglik_const();
}

// chi-squared over the unconstrained parameterization (for optimizers).
template <class T>
T chi2_u(const fit_problem& fp, std::span<const T> u) {
  auto t = fp.spec().from_unconstrained<T>(u);
  if constexpr (std::is_same_v<T, ad::var>)
    return chi2_fused(fp, std::span<const ad::var>(t.x));
  else
    return chi2<T>(fp, std::span<const T>(t.x));
}

// Log posterior density over the unconstrained parameterization, including
// the transform Jacobian.
template <class T>
T log_posterior_u(const fit_problem& fp, std::span<const T> u) {
  auto t = fp.spec().from_unconstrained<T>(u);
  T lp = fp.spec().log_prior<T>(std::span<const T>(t.x));
  return lp + log_likelihood<T>(fp, std::span<const T>(t.x)) + t.logdet;
}

// Callable wrappers used by the optimizer and the samplers.

class posterior_density {
 public:
  explicit posterior_density(const fit_problem& fp) : fp_(&fp) {}
  std::size_t dim() const { return fp_->spec().free_count(); }

  double value(std::span<const double> u) const { return log_posterior_u<double>(*fp_, u); }

  double value_grad(std::span<const double> u, std::span<double> grad) const {
    auto vg = ad::value_and_grad(
        [this](std::span<const ad::var> uv) { return log_posterior_u<ad::var>(*fp_, uv); },
        u);
    std::copy(vg.grad.begin(), vg.grad.end(), grad.begin());
    return vg.value;
  }

  template <class T>
  T operator()(std::span<const T> u) const {
    return log_posterior_u<T>(*fp_, u);
  }

 private:
  const fit_problem* fp_;
};

class chi2_objective {
 public:
  explicit chi2_objective(const fit_problem& fp) : fp_(&fp) {}
  std::size_t dim() const { return fp_->spec().free_count(); }

  double value(std::span<const double> u) const { return chi2_u<double>(*fp_, u); }

  double value_grad(std::span<const double> u, std::span<double> grad) const {
    auto vg = ad::value_and_grad(
        [this](std::span<const ad::var> uv) { return chi2_u<ad::var>(*fp_, uv); }, u);
    std::copy(vg.grad.begin(), vg.grad.end(), grad.begin());
    return vg.value;
  }

 private:
  const fit_problem* fp_;
};

}  // namespace reflgrad
