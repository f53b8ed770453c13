#pragma once

// Model definitions reused across test binaries: a two-layer quartz film on
// silicon and a four-device OLED co-fit with shared instrument parameters.

#include <string>
#include <vector>

#include "reflgrad/model.hpp"
#include "reflgrad/rng.hpp"
#include "reflgrad/slab.hpp"

namespace fixtures {

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return out;
}

inline std::vector<double> logspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
  return out;
}

// Noisy curves drawn from the model at `truth`, one per dataset, with
// sigma_R = rel * R + abs.
inline std::vector<reflgrad::curve> synth_data(
    const reflgrad::model_spec& spec, std::span<const double> truth,
    const std::vector<std::vector<double>>& qgrids, reflgrad::rng& noise,
    double rel = 0.02, double abs = 1e-8,
    const std::vector<std::vector<double>>* dqgrids = nullptr) {
  auto params = spec.unpack<double>(truth);
  std::vector<reflgrad::curve> out;
  for (std::size_t d = 0; d < spec.dataset_count(); ++d) {
    std::span<const double> dq;
    if (dqgrids && !(*dqgrids)[d].empty()) dq = (*dqgrids)[d];
    auto model = reflgrad::reflectivity(params[d].slab,
                                        std::span<const double>(qgrids[d]),
                                        spec.datasets()[d].smear, params[d].smear_pct,
                                        dq);
    reflgrad::curve c;
    c.q = qgrids[d];
    if (!dq.empty()) c.dq.assign(dq.begin(), dq.end());
    for (std::size_t j = 0; j < model.size(); ++j) {
      double s = rel * model[j] + abs;
      c.r.push_back(model[j] + s * noise.normal());
      c.sigma_r.push_back(s);
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline reflgrad::dataset_def quartz_dataset(reflgrad::smear_mode mode =
                                                reflgrad::smear_mode::none) {
  using reflgrad::fixed_param;
  using reflgrad::free_param;
  reflgrad::dataset_def d;
  d.name = "quartz";
  d.fronting_sld = fixed_param(0.0);
  d.layers.push_back({"film", free_param(1500.0, 1400.0, 1500.0),
                      free_param(5.0, 0.0, 5.0), free_param(5.0, 2.0, 20.0)});
  d.layers.push_back({"oxide", free_param(10.0, 0.0, 50.0), free_param(4.2, 0.0, 5.0),
                      free_param(5.0, 2.0, 20.0)});
  d.backing_sld = free_param(2.07, 0.0, 5.0);
  d.backing_rough = free_param(5.0, 2.0, 20.0);
  d.scale = free_param(1.0, 0.9, 1.5);
  d.bkg = free_param(1e-7, std::exp(-20.0), 1.0);
  d.smear = mode;
  return d;
}

inline reflgrad::model_spec quartz_spec(reflgrad::smear_mode mode =
                                            reflgrad::smear_mode::none) {
  return reflgrad::model_spec::build({quartz_dataset(mode)});
}

// Posterior means used as the generating model for synthetic quartz data.
inline std::vector<double> quartz_truth(const reflgrad::model_spec& spec) {
  reflgrad::dataset_params<double> p;
  p.slab.thick = {1470.0, 2.122};
  p.slab.sld = {0.0, 4.240, 0.323, 2.195};
  p.slab.rough = {11.402, 10.905, 3.163};
  p.slab.scale = 1.048;
  p.slab.bkg = 1.05e-7;
  p.smear_pct = 0.0;
  return spec.pack({p});
}

// Instrument grid mimicking a time-of-flight reflectometer: log-spaced Q with
// a constant-fraction FWHM resolution column.  The resolution matters for the
// fit landscape: it damps the high-Q fringes enough that the film thickness
// descends smoothly from its upper bound instead of locking onto an aliased
// interference order.
struct quartz_grid {
  std::vector<double> q;
  std::vector<double> dq;
};

inline quartz_grid quartz_instrument_grid(std::size_t n = 200, double qlo = 0.008,
                                          double qhi = 0.30, double fwhm_pct = 8.0) {
  quartz_grid g;
  g.q = logspace(qlo, qhi, n);
  g.dq.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.dq[i] = 0.01 * fwhm_pct * g.q[i];
  return g;
}

// Synthetic quartz dataset used by the recovery tests: pointwise-smeared
// curve from the Table-level generating parameters on the instrument grid.
inline std::vector<reflgrad::curve> quartz_synth_curves(const reflgrad::model_spec& spec,
                                                        std::span<const double> truth,
                                                        unsigned noise_seed) {
  auto grid = quartz_instrument_grid();
  reflgrad::rng noise(noise_seed);
  std::vector<std::vector<double>> dqg{grid.dq};
  return synth_data(spec, truth, {grid.q}, noise, 0.02, 1e-8, &dqg);
}

struct oled_device_truth {
  double air_rough;
  double f8bt_sld, f8bt_thick, f8bt_rough;
  double tfb_sld, tfb_thick, tfb_rough;
  double pedot_sld, pedot_thick, pedot_rough;
  double oxide_sld, oxide_thick, oxide_rough;
  double scale;
};

inline const std::vector<oled_device_truth>& oled_truth_table() {
  static const std::vector<oled_device_truth> t = {
      {10.1, 1.11, 690.0, 18.1, 3.98, 417.0, 13.1, 1.54, 589.0, 2.89, 3.43, 15.1,
       6.22, 0.954},
      {14.3, 1.29, 693.0, 8.58, 4.09, 410.0, 15.5, 1.52, 516.0, 3.15, 3.17, 15.7,
       2.89, 1.02},
      {13.0, 0.996, 680.0, 4.74, 4.15, 463.0, 16.7, 1.65, 594.0, 4.44, 2.71, 41.3,
       4.46, 0.998},
      {19.3, 1.17, 673.0, 10.2, 4.38, 393.0, 11.9, 1.49, 547.0, 4.26, 3.28, 18.2,
       6.08, 0.963}};
  return t;
}

constexpr double oled_truth_bkg = 4.99e-7;
constexpr double oled_truth_smear_pct = 5.56;
constexpr double oled_truth_si_sld = 2.09;

inline std::vector<reflgrad::dataset_def> oled_datasets() {
  using reflgrad::fixed_param;
  using reflgrad::free_param;
  static const char* names[4] = {"as_cast", "annealed_80", "annealed_140",
                                 "annealed_180"};
  std::vector<reflgrad::dataset_def> out;
  for (int k = 0; k < 4; ++k) {
    reflgrad::dataset_def d;
    d.name = names[k];
    d.fronting_sld = fixed_param(0.0);
    d.layers.push_back({"f8bt", free_param(700.0, 0.0, 800.0),
                        free_param(1.0, 0.0, 5.0), free_param(10.0, 0.0, 30.0)});
    d.layers.push_back({"tfb", free_param(400.0, 0.0, 800.0),
                        free_param(4.0, 0.0, 5.0), free_param(10.0, 0.0, 30.0)});
    d.layers.push_back({"pedot", free_param(600.0, 0.0, 800.0),
                        free_param(1.5, 0.0, 5.0), free_param(10.0, 0.0, 30.0)});
    d.layers.push_back({"oxide", free_param(50.0, 0.0, 800.0),
                        free_param(3.0, 0.0, 5.0), free_param(5.0, 0.0, 8.0)});
    d.backing_sld = free_param(2.07, 0.0, 5.0, "si_sld");
    d.backing_rough = free_param(5.0, 0.0, 8.0);
    d.scale = free_param(1.0, 0.9, 1.5);
    d.bkg = free_param(5e-7, std::exp(-20.0), 1e-5, "bkg");
    d.smear = reflgrad::smear_mode::constant;
    d.smear_pct = free_param(1.0, 0.0, 10.0, "smear");
    out.push_back(std::move(d));
  }
  return out;
}

inline reflgrad::model_spec oled_spec() {
  return reflgrad::model_spec::build(oled_datasets());
}

inline std::vector<double> oled_truth(const reflgrad::model_spec& spec) {
  std::vector<reflgrad::dataset_params<double>> all;
  for (const auto& t : oled_truth_table()) {
    reflgrad::dataset_params<double> p;
    p.slab.thick = {t.f8bt_thick, t.tfb_thick, t.pedot_thick, t.oxide_thick};
    p.slab.sld = {0.0, t.f8bt_sld, t.tfb_sld, t.pedot_sld, t.oxide_sld,
                  fixtures::oled_truth_si_sld};
    p.slab.rough = {t.air_rough, t.f8bt_rough, t.tfb_rough, t.pedot_rough,
                    t.oxide_rough};
    p.slab.scale = t.scale;
    p.slab.bkg = oled_truth_bkg;
    p.smear_pct = oled_truth_smear_pct;
    all.push_back(std::move(p));
  }
  return spec.pack(all);
}

}  // namespace fixtures
