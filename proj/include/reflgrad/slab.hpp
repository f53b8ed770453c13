#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "reflgrad/ad.hpp"
#include "reflgrad/errors.hpp"
#include "reflgrad/kernel.hpp"
#include "reflgrad/scalar.hpp"

namespace reflgrad {

// Everything the forward model needs for one dataset.
template <class T>
struct dataset_params {
  slab_params<T> slab;
  T smear_pct{0};
};

enum class param_role { thickness, sld, roughness, scale, background, smear_percent };

inline const char* role_name(param_role r) {
  switch (r) {
    case param_role::thickness: return "thickness";
    case param_role::sld: return "sld";
    case param_role::roughness: return "roughness";
    case param_role::scale: return "scale";
    case param_role::background: return "background";
    case param_role::smear_percent: return "smear_percent";
  }
  return "unknown";
}

// Log density attached to a single parameter.  When present it replaces the
// default uniform term; the support is still truncated to the bounds.
struct prior_fn {
  std::function<double(double)> logpdf;
  std::function<ad::var(const ad::var&)> logpdf_ad;
};

inline std::shared_ptr<const prior_fn> gaussian_prior(double mean, double stdev) {
  auto p = std::make_shared<prior_fn>();
  double norm = -0.5 * std::log(2.0 * 3.141592653589793238462643 * stdev * stdev);
  p->logpdf = [=](double x) {
    double t = (x - mean) / stdev;
    return norm - 0.5 * t * t;
  };
  p->logpdf_ad = [=](const ad::var& x) {
    ad::var t = (x - mean) / stdev;
    return norm - 0.5 * t * t;
  };
  return p;
}

struct param_def {
  double init = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool fixed = true;
  std::string share;  // non-empty ties this slot to every other slot with the tag
  std::shared_ptr<const prior_fn> prior;
};

inline param_def fixed_param(double value) {
  param_def p;
  p.init = value;
  p.fixed = true;
  return p;
}

inline param_def free_param(double init, double lower, double upper,
                            std::string share = {}) {
  param_def p;
  p.init = init;
  p.lower = lower;
  p.upper = upper;
  p.fixed = false;
  p.share = std::move(share);
  return p;
}

struct layer_def {
  std::string name;
  param_def thick;
  param_def sld;
  param_def rough_above;  // interface between this layer and the medium above
};

struct dataset_def {
  std::string name;
  std::string data_path;
  param_def fronting_sld;
  std::vector<layer_def> layers;
  param_def backing_sld;
  param_def backing_rough;
  param_def scale = fixed_param(1.0);
  param_def bkg = fixed_param(0.0);
  smear_mode smear = smear_mode::none;
  param_def smear_pct = fixed_param(0.0);
};

namespace detail {

template <class T>
T softplus(const T& t) {
  using std::exp;
  using std::log1p;
  if (value_of(t) > 30.0) return t + exp(-t);
  return log1p(exp(t));
}

template <class T>
T sigmoid(const T& t) {
  using std::exp;
  if (value_of(t) >= 0.0) return 1.0 / (1.0 + exp(-t));
  T e = exp(t);
  return e / (1.0 + e);
}

}  // namespace detail

// Maps a list of dataset definitions onto one flat vector of free parameters.
// Traversal order inside each dataset: fronting SLD, then per layer thickness,
// SLD, roughness above, then backing SLD, backing roughness, scale,
// background, resolution percentage.  A shared parameter occupies one entry at
// its first occurrence.
class model_spec {
 public:
  struct free_info {
    std::string name;
    param_role role;
    double init = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    std::shared_ptr<const prior_fn> prior;
  };

  template <class T>
  struct transformed {
    std::vector<T> x;
    T logdet{0};
  };

  static model_spec build(std::vector<dataset_def> defs) {
    if (defs.empty()) throw config_error("model needs at least one dataset");
    model_spec spec;
    spec.defs_ = std::move(defs);
    std::map<std::string, int> seen_names;
    for (const auto& d : spec.defs_) {
      if (d.name.empty()) throw config_error("dataset name must not be empty");
      if (++seen_names[d.name] > 1)
        throw config_error("duplicate dataset name '" + d.name + "'");
    }
    std::map<std::string, int> share_index;
    for (const auto& d : spec.defs_) {
      dataset_slots slots;
      slots.mode = d.smear;
      std::size_t n = d.layers.size();
      slots.sld.resize(n + 2);
      slots.thick.resize(n);
      slots.rough.resize(n + 1);
      slots.sld[0] = spec.claim(d.fronting_sld, param_role::sld,
                                d.name + ".fronting.sld", share_index);
      for (std::size_t i = 0; i < n; ++i) {
        const layer_def& l = d.layers[i];
        std::string base = d.name + "." + (l.name.empty() ? "layer" + std::to_string(i) : l.name);
        slots.thick[i] =
            spec.claim(l.thick, param_role::thickness, base + ".thick", share_index);
        slots.sld[i + 1] = spec.claim(l.sld, param_role::sld, base + ".sld", share_index);
        slots.rough[i] =
            spec.claim(l.rough_above, param_role::roughness, base + ".rough", share_index);
      }
      slots.sld[n + 1] = spec.claim(d.backing_sld, param_role::sld,
                                    d.name + ".backing.sld", share_index);
      slots.rough[n] = spec.claim(d.backing_rough, param_role::roughness,
                                  d.name + ".backing.rough", share_index);
      slots.scale = spec.claim(d.scale, param_role::scale, d.name + ".scale", share_index);
      slots.bkg =
          spec.claim(d.bkg, param_role::background, d.name + ".bkg", share_index);
      if (d.smear != smear_mode::constant && !d.smear_pct.fixed)
        throw config_error(
            "smear_pct can only be free when the dataset uses constant smearing ('" +
            d.name + "')");
      slots.pct = spec.claim(d.smear_pct, param_role::smear_percent,
                             d.name + ".smear_pct", share_index);
      spec.slots_.push_back(std::move(slots));
    }
    for (const dataset_slots& s : spec.slots_) {
      dataset_layout lay;
      for (const slot& t : s.thick) lay.thick.push_back(t.idx);
      for (const slot& t : s.sld) lay.sld.push_back(t.idx);
      for (const slot& t : s.rough) lay.rough.push_back(t.idx);
      lay.scale = s.scale.idx;
      lay.bkg = s.bkg.idx;
      lay.pct = s.pct.idx;
      spec.layouts_.push_back(std::move(lay));
    }
    return spec;
  }

  // Free-vector index of every slab slot, -1 where the value is fixed.
  struct dataset_layout {
    std::vector<int> thick, sld, rough;
    int scale = -1, bkg = -1, pct = -1;
  };

  std::size_t free_count() const { return free_.size(); }
  const std::vector<free_info>& free() const { return free_; }
  std::size_t dataset_count() const { return defs_.size(); }
  const std::vector<dataset_def>& datasets() const { return defs_; }
  const std::vector<dataset_layout>& layouts() const { return layouts_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(free_.size());
    for (const auto& f : free_) out.push_back(f.name);
    return out;
  }

  std::vector<double> initial() const {
    std::vector<double> out;
    out.reserve(free_.size());
    for (const auto& f : free_) out.push_back(f.init);
    return out;
  }

  std::vector<std::pair<double, double>> bounds() const {
    std::vector<std::pair<double, double>> out;
    out.reserve(free_.size());
    for (const auto& f : free_) out.emplace_back(f.lower, f.upper);
    return out;
  }

  template <class T>
  std::vector<dataset_params<T>> unpack(std::span<const T> v) const {
    require_length(v.size());
    std::vector<dataset_params<T>> out(slots_.size());
    for (std::size_t di = 0; di < slots_.size(); ++di) {
      const dataset_slots& s = slots_[di];
      dataset_params<T>& p = out[di];
      p.slab.thick.reserve(s.thick.size());
      p.slab.sld.reserve(s.sld.size());
      p.slab.rough.reserve(s.rough.size());
      for (const slot& t : s.thick) p.slab.thick.push_back(fetch(t, v));
      for (const slot& t : s.sld) p.slab.sld.push_back(fetch(t, v));
      for (const slot& t : s.rough) p.slab.rough.push_back(fetch(t, v));
      p.slab.scale = fetch(s.scale, v);
      p.slab.bkg = fetch(s.bkg, v);
      p.smear_pct = fetch(s.pct, v);
    }
    return out;
  }

  std::vector<double> pack(const std::vector<dataset_params<double>>& values) const {
    if (values.size() != slots_.size())
      throw config_error("pack needs " + std::to_string(slots_.size()) +
                         " datasets, got " + std::to_string(values.size()));
    std::vector<double> v(free_.size(), 0.0);
    for (std::size_t di = 0; di < slots_.size(); ++di) {
      const dataset_slots& s = slots_[di];
      const dataset_params<double>& p = values[di];
      if (p.slab.thick.size() != s.thick.size() || p.slab.sld.size() != s.sld.size() ||
          p.slab.rough.size() != s.rough.size())
        throw config_error("pack: dataset " + std::to_string(di) +
                           " has a different layer layout than the model");
      for (std::size_t i = 0; i < s.thick.size(); ++i)
        store(s.thick[i], p.slab.thick[i], v);
      for (std::size_t i = 0; i < s.sld.size(); ++i) store(s.sld[i], p.slab.sld[i], v);
      for (std::size_t i = 0; i < s.rough.size(); ++i)
        store(s.rough[i], p.slab.rough[i], v);
      store(s.scale, p.slab.scale, v);
      store(s.bkg, p.slab.bkg, v);
      store(s.pct, p.smear_pct, v);
    }
    return v;
  }

  // u_i = log((x_i - l) / (h - x_i)); defined strictly inside the box.
  std::vector<double> to_unconstrained(std::span<const double> x) const {
    require_length(x.size());
    std::vector<double> u(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const free_info& f = free_[i];
      if (!(x[i] > f.lower) || !(x[i] < f.upper))
        throw config_error("parameter '" + f.name + "' = " + std::to_string(x[i]) +
                           " is not strictly inside [" + std::to_string(f.lower) +
                           ", " + std::to_string(f.upper) + "]");
      u[i] = std::log(x[i] - f.lower) - std::log(f.upper - x[i]);
    }
    return u;
  }

  // x_i = l + (h - l) * sigmoid(u_i), together with log|dx/du|.
  template <class T>
  transformed<T> from_unconstrained(std::span<const T> u) const {
    require_length(u.size());
    transformed<T> out;
    out.x.reserve(u.size());
    out.logdet = T(0.0);
    for (std::size_t i = 0; i < u.size(); ++i) {
      const free_info& f = free_[i];
      double width = f.upper - f.lower;
      out.x.push_back(f.lower + width * detail::sigmoid(u[i]));
      out.logdet += std::log(width) - detail::softplus(u[i]) - detail::softplus(-u[i]);
    }
    return out;
  }

  // Joint log prior over the free parameters in physical space.  Bounds form
  // a closed support; outside it the result is -inf.
  template <class T>
  T log_prior(std::span<const T> x) const {
    require_length(x.size());
    T acc(0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const free_info& f = free_[i];
      double xv = value_of(x[i]);
      if (xv < f.lower || xv > f.upper)
        return T(-std::numeric_limits<double>::infinity());
      if (f.prior) {
        if constexpr (std::is_same_v<T, ad::var>)
          acc += f.prior->logpdf_ad(x[i]);
        else
          acc += f.prior->logpdf(xv);
      } else {
        acc += -std::log(f.upper - f.lower);
      }
    }
    return acc;
  }

 private:
  struct slot {
    int idx = -1;  // -1 means fixed
    double fixed = 0.0;
  };
  struct dataset_slots {
    std::vector<slot> thick, sld, rough;
    slot scale, bkg, pct;
    smear_mode mode = smear_mode::none;
  };

  template <class T>
  static T fetch(const slot& s, std::span<const T> v) {
    return s.idx >= 0 ? v[static_cast<std::size_t>(s.idx)] : T(s.fixed);
  }

  static void store(const slot& s, double value, std::vector<double>& v) {
    if (s.idx >= 0) v[static_cast<std::size_t>(s.idx)] = value;
  }

  void require_length(std::size_t n) const {
    if (n != free_.size())
      throw config_error("parameter vector has " + std::to_string(n) +
                         " entries, model has " + std::to_string(free_.size()) +
                         " free parameters");
  }

  static bool nonneg_role(param_role r) { return r != param_role::sld; }

  slot claim(const param_def& p, param_role role, const std::string& name,
             std::map<std::string, int>& share_index) {
    slot s;
    if (p.fixed) {
      if (!p.share.empty())
        throw config_error("fixed parameter '" + name + "' cannot carry share tag '" +
                           p.share + "'");
      if (nonneg_role(role) && p.init < 0.0)
        throw config_error("parameter '" + name + "' must be non-negative, got " +
                           std::to_string(p.init));
      s.fixed = p.init;
      return s;
    }
    if (!(p.lower < p.upper))
      throw config_error("parameter '" + name + "' needs lower < upper, got [" +
                         std::to_string(p.lower) + ", " + std::to_string(p.upper) + "]");
    if (nonneg_role(role) && p.lower < 0.0)
      throw config_error("parameter '" + name + "' must have a non-negative lower bound");
    if (p.init < p.lower || p.init > p.upper)
      throw config_error("initial value " + std::to_string(p.init) + " of '" + name +
                         "' lies outside [" + std::to_string(p.lower) + ", " +
                         std::to_string(p.upper) + "]");
    if (!p.share.empty()) {
      auto it = share_index.find(p.share);
      if (it != share_index.end()) {
        const free_info& f = free_[static_cast<std::size_t>(it->second)];
        if (f.role != role)
          throw config_error("share group '" + p.share + "' mixes " +
                             role_name(f.role) + " and " + role_name(role));
        if (f.lower != p.lower || f.upper != p.upper)
          throw config_error("share group '" + p.share +
                             "' has mismatched bounds between its members");
        s.idx = it->second;
        return s;
      }
    }
    free_info f;
    f.name = p.share.empty() ? name : "shared." + p.share;
    f.role = role;
    f.lower = p.lower;
    f.upper = p.upper;
    f.prior = p.prior;
    // the unconstrained transform needs a strictly interior starting point
    double nudge = 1e-6 * (p.upper - p.lower);
    f.init = std::min(std::max(p.init, p.lower + nudge), p.upper - nudge);
    s.idx = static_cast<int>(free_.size());
    if (!p.share.empty()) share_index.emplace(p.share, s.idx);
    free_.push_back(std::move(f));
    return s;
  }

  std::vector<dataset_def> defs_;
  std::vector<dataset_slots> slots_;
  std::vector<free_info> free_;
  std::vector<dataset_layout> layouts_;
};

}  // namespace reflgrad
