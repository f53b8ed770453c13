#pragma once

// Specular neutron reflectivity of a slab model (Abeles matrix formalism)
// with Nevot-Croce interfacial roughness, Gaussian resolution smearing and
// the real-space scattering-length-density profile.
//
// All routines are templated on the scalar type so the same code path
// evaluates plain values and reverse-mode derivatives.  A specialised
// double-only forward+adjoint pair at the bottom backs the fused gradient
// evaluations used by the fitting and sampling hot loops.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "reflgrad/complex.hpp"
#include "reflgrad/errors.hpp"
#include "reflgrad/scalar.hpp"

namespace reflgrad {

// FWHM of a Gaussian divided by its standard deviation: 2*sqrt(2*ln 2).
inline constexpr double fwhm_to_sigma = 2.3548200450309493;

// Resolution kernels are truncated at this many standard deviations.
inline constexpr double smear_half_width_sigmas = 3.5;

inline constexpr int smear_points = 17;

// SLDs are stored in units of 1e-6 inverse square angstroms.
inline constexpr double sld_units = 1e-6;

enum class smear_mode { none, constant, pointwise };

// One stack of slabs.  sld has one entry per medium (fronting, each layer,
// backing); rough has one entry per interface, top to bottom; thick has one
// entry per interior layer.
template <class T>
struct slab_params {
  std::vector<T> thick;
  std::vector<T> sld;
  std::vector<T> rough;
  T scale{1.0};
  T bkg{0.0};

  std::size_t nlayers() const { return thick.size(); }
  std::size_t nmedia() const { return sld.size(); }
  std::size_t ninterfaces() const { return rough.size(); }
};

template <class T>
void validate(const slab_params<T>& p) {
  if (p.sld.size() != p.thick.size() + 2)
    throw config_error("slab model needs one SLD per medium: expected " +
                       std::to_string(p.thick.size() + 2) + " for " +
                       std::to_string(p.thick.size()) + " layers, got " +
                       std::to_string(p.sld.size()));
  if (p.rough.size() != p.thick.size() + 1)
    throw config_error("slab model needs one roughness per interface: expected " +
                       std::to_string(p.thick.size() + 1) + " for " +
                       std::to_string(p.thick.size()) + " layers, got " +
                       std::to_string(p.rough.size()));
  for (const T& t : p.thick)
    if (value_of(t) < 0.0) throw config_error("layer thickness must be non-negative");
  for (const T& s : p.rough)
    if (value_of(s) < 0.0) throw config_error("interfacial roughness must be non-negative");
}

namespace detail {

template <class T>
std::vector<T> sld_contrast(const slab_params<T>& p) {
  // 4*pi*(rho_m - rho_fronting), with the unit scaling folded in
  std::vector<T> c(p.nmedia());
  c[0] = T(0.0);
  for (std::size_t m = 1; m < p.nmedia(); ++m)
    c[m] = (p.sld[m] - p.sld[0]) * (4.0 * 3.141592653589793238462643 * sld_units);
  return c;
}

// Raw reflectivity (no scale/background) at a single momentum transfer.
template <class T>
T abeles_point(const slab_params<T>& p, std::span<const T> contrast, const T& q) {
  using std::sqrt;
  using C = cplx<T>;
  const std::size_t nifc = p.ninterfaces();

  const T qq4 = q * q * 0.25;
  C ki(q * 0.5, T(0.0));

  C p00(T(1.0)), p01(T(0.0)), p10(T(0.0)), p11(T(0.0));
  for (std::size_t i = 0; i < nifc; ++i) {
    C kn = csqrt_upper(C(qq4 - contrast[i + 1], T(0.0)));
    C den = ki + kn;
    C f = (ki - kn) / den;
    C r = f * cexp(ki * kn * (p.rough[i] * p.rough[i] * -2.0));
    if (i == 0) {
      p00 = C(T(1.0));
      p01 = r;
      p10 = r;
      p11 = C(T(1.0));
    } else {
      C arg(-ki.im * p.thick[i - 1], ki.re * p.thick[i - 1]);
      C beta = cexp(arg);
      C binv = cexp(-arg);
      C m01 = r * beta;
      C m10 = r * binv;
      C t00 = p00 * beta + p01 * m10;
      C t01 = p00 * m01 + p01 * binv;
      C t10 = p10 * beta + p11 * m10;
      C t11 = p10 * m01 + p11 * binv;
      p00 = t00;
      p01 = t01;
      p10 = t10;
      p11 = t11;
    }
    ki = kn;
  }
  return norm2(p10) / norm2(p00);
}

inline void require_positive_q(double q) {
  if (!(q > 0.0))
    throw data_error("momentum transfer must be positive, got " + std::to_string(q));
}

}  // namespace detail

// Reflectivity R(q) = scale * raw(q) + bkg on a grid of momentum transfers.
template <class T>
std::vector<T> abeles(const slab_params<T>& p, std::span<const double> q) {
  validate(p);
  std::vector<T> contrast = detail::sld_contrast(p);
  std::vector<T> out(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) {
    detail::require_positive_q(q[j]);
    out[j] = p.scale * detail::abeles_point(p, std::span<const T>(contrast), T(q[j])) + p.bkg;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian resolution smearing.
//
// The convolution integral over +-3.5 sigma is evaluated with a fixed
// 17-point Gauss-Legendre rule in the scaled variable u = offset/(3.5 sigma),
// where the combined quadrature-times-Gaussian weights are independent of
// sigma.  Weights are normalised to unit sum so constant curves smear to
// themselves exactly.

struct smear_rule {
  std::array<double, smear_points> x;  // abscissas in [-1, 1]
  std::array<double, smear_points> w;  // normalised weights
};

namespace detail {

inline void gauss_legendre(int n, double* x, double* w) {
  for (int k = 0; k < n; ++k) {
    double t = std::cos(3.141592653589793238462643 * (k + 0.75) / (n + 0.5));
    double pn = 0.0, dpn = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = t;
      for (int m = 2; m <= n; ++m) {
        double p2 = ((2.0 * m - 1.0) * t * p1 - (m - 1.0) * p0) / m;
        p0 = p1;
        p1 = p2;
      }
      pn = p1;
      dpn = n * (t * p1 - p0) / (t * t - 1.0);
      double step = pn / dpn;
      t -= step;
      if (std::fabs(step) < 1e-15) break;
    }
    x[k] = t;
    w[k] = 2.0 / ((1.0 - t * t) * dpn * dpn);
  }
}

}  // namespace detail

inline const smear_rule& gaussian_smear_rule() {
  static const smear_rule rule = [] {
    smear_rule r;
    detail::gauss_legendre(smear_points, r.x.data(), r.w.data());
    double total = 0.0;
    for (int k = 0; k < smear_points; ++k) {
      double t = smear_half_width_sigmas * r.x[k];
      r.w[k] *= std::exp(-0.5 * t * t);
      total += r.w[k];
    }
    for (int k = 0; k < smear_points; ++k) r.w[k] /= total;
    return r;
  }();
  return rule;
}

namespace detail {

// Smeared reflectivity at one point given the resolution sigma/q ratio.
template <class T>
T smear_point(const slab_params<T>& p, std::span<const T> contrast, double q,
              const T& sigma_over_q) {
  const smear_rule& rule = gaussian_smear_rule();
  T acc(0.0);
  for (int k = 0; k < smear_points; ++k) {
    T qk = q * (1.0 + sigma_over_q * (smear_half_width_sigmas * rule.x[k]));
    if (!(value_of(qk) > 0.0))
      throw data_error("resolution kernel reaches non-positive q at q=" + std::to_string(q) +
                       "; narrow the resolution or trim the low-q data");
    acc += rule.w[k] * abeles_point(p, contrast, qk);
  }
  return acc;
}

}  // namespace detail

// Constant fractional resolution: dq_pct is the FWHM of dq/q in percent.
template <class T>
std::vector<T> smear_constant(const slab_params<T>& p, std::span<const double> q,
                              const T& dq_pct) {
  if (value_of(dq_pct) < 0.0)
    throw config_error("resolution percentage must be non-negative");
  if (value_of(dq_pct) == 0.0) return abeles(p, q);
  validate(p);
  std::vector<T> contrast = detail::sld_contrast(p);
  std::span<const T> cs(contrast);
  T sigma_over_q = dq_pct * (0.01 / fwhm_to_sigma);
  std::vector<T> out(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) {
    detail::require_positive_q(q[j]);
    out[j] = p.scale * detail::smear_point(p, cs, q[j], sigma_over_q) + p.bkg;
  }
  return out;
}

// Per-point resolution: dq[j] is the FWHM of the q-resolution at q[j].
template <class T>
std::vector<T> smear_pointwise(const slab_params<T>& p, std::span<const double> q,
                               std::span<const double> dq) {
  if (dq.size() != q.size())
    throw data_error("per-point resolution needs one dq per q value: got " +
                     std::to_string(dq.size()) + " for " + std::to_string(q.size()));
  validate(p);
  std::vector<T> contrast = detail::sld_contrast(p);
  std::span<const T> cs(contrast);
  std::vector<T> out(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) {
    detail::require_positive_q(q[j]);
    if (!(dq[j] >= 0.0)) throw data_error("per-point resolution must be non-negative");
    if (dq[j] == 0.0) {
      out[j] = p.scale * detail::abeles_point(p, cs, T(q[j])) + p.bkg;
    } else {
      T s_over_q(dq[j] / fwhm_to_sigma / q[j]);
      out[j] = p.scale * detail::smear_point(p, cs, q[j], s_over_q) + p.bkg;
    }
  }
  return out;
}

// Dispatch over the smearing mode.
template <class T>
std::vector<T> reflectivity(const slab_params<T>& p, std::span<const double> q,
                            smear_mode mode, const T& dq_pct,
                            std::span<const double> dq = {}) {
  switch (mode) {
    case smear_mode::none:
      return abeles(p, q);
    case smear_mode::constant:
      return smear_constant(p, q, dq_pct);
    case smear_mode::pointwise:
      return smear_pointwise(p, q, dq);
  }
  throw config_error("unknown smearing mode");
}

// ---------------------------------------------------------------------------
// Real-space SLD profile: error-function broadened steps at each interface.

template <class T>
std::vector<T> sld_profile(const slab_params<T>& p, std::span<const double> z) {
  using std::erf;
  using std::sqrt;
  validate(p);
  const std::size_t nifc = p.ninterfaces();
  std::vector<T> depth(nifc);  // interface positions, first interface at z = 0
  T acc(0.0);
  for (std::size_t i = 0; i < nifc; ++i) {
    depth[i] = acc;
    if (i < p.thick.size()) acc += p.thick[i];
  }
  std::vector<T> out(z.size());
  const double inv_sqrt2 = 0.7071067811865475244008443621;
  for (std::size_t j = 0; j < z.size(); ++j) {
    T rho = p.sld[0];
    for (std::size_t i = 0; i < nifc; ++i) {
      T step = p.sld[i + 1] - p.sld[i];
      if (value_of(p.rough[i]) == 0.0) {
        double lo = value_of(depth[i]);
        if (z[j] > lo)
          rho += step;
        else if (z[j] == lo)
          rho += step * 0.5;
      } else {
        rho += step * 0.5 * (1.0 + erf((z[j] - depth[i]) / p.rough[i] * inv_sqrt2));
      }
    }
    out[j] = rho;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused forward+adjoint evaluation (doubles only).
//
// The reverse sweep propagates complex adjoints through the characteristic
// matrix recurrence; for a real loss L and complex intermediate w the stored
// adjoint is dL/dRe(w) + i dL/dIm(w), so holomorphic steps pull back through
// the conjugated local derivative and real inputs take the real part.

struct kernel_point_workspace {
  std::vector<cplx<double>> k;                      // per medium
  std::vector<cplx<double>> f, nc, beta, binv;      // per interface
  std::vector<cplx<double>> a00, a01, a10, a11;     // prefix matrix before step i
  cplx<double> p00, p01, p10, p11;                  // final matrix
};

// Adjoint accumulators laid out like slab_params plus the momentum transfer.
struct kernel_point_adjoint {
  std::vector<double> d_thick, d_sld, d_rough;
  double d_q = 0.0;

  void reset(const slab_params<double>& p) {
    d_thick.assign(p.nlayers(), 0.0);
    d_sld.assign(p.nmedia(), 0.0);
    d_rough.assign(p.ninterfaces(), 0.0);
    d_q = 0.0;
  }
};

namespace detail {

// Re(conj(c) * z): pullback of a complex adjoint z onto a real input whose
// local derivative into the complex graph is c.
inline double re_dot(const cplx<double>& c, const cplx<double>& z) {
  return c.re * z.re + c.im * z.im;
}

inline double abeles_point_fwd(const slab_params<double>& p, std::span<const double> contrast,
                               double q, kernel_point_workspace& ws) {
  using C = cplx<double>;
  const std::size_t nifc = p.ninterfaces();
  const std::size_t nmedia = p.nmedia();
  ws.k.resize(nmedia);
  ws.f.resize(nifc);
  ws.nc.resize(nifc);
  ws.beta.resize(nifc);
  ws.binv.resize(nifc);
  ws.a00.resize(nifc);
  ws.a01.resize(nifc);
  ws.a10.resize(nifc);
  ws.a11.resize(nifc);

  const double qq4 = q * q * 0.25;
  ws.k[0] = C(q * 0.5, 0.0);
  for (std::size_t m = 1; m < nmedia; ++m)
    ws.k[m] = csqrt_upper(C(qq4 - contrast[m], 0.0));

  C p00(1.0), p01(0.0), p10(0.0), p11(1.0);
  for (std::size_t i = 0; i < nifc; ++i) {
    const C ki = ws.k[i];
    const C kn = ws.k[i + 1];
    const C den = ki + kn;
    const C f = (ki - kn) / den;
    const C nc = cexp(ki * kn * (p.rough[i] * p.rough[i] * -2.0));
    const C r = f * nc;
    ws.f[i] = f;
    ws.nc[i] = nc;
    ws.a00[i] = p00;
    ws.a01[i] = p01;
    ws.a10[i] = p10;
    ws.a11[i] = p11;
    if (i == 0) {
      ws.beta[i] = C(1.0);
      ws.binv[i] = C(1.0);
      p00 = C(1.0);
      p01 = r;
      p10 = r;
      p11 = C(1.0);
    } else {
      const double d = p.thick[i - 1];
      const C arg(-ki.im * d, ki.re * d);
      const C beta = cexp(arg);
      const C binv = cexp(-arg);
      ws.beta[i] = beta;
      ws.binv[i] = binv;
      const C m01 = r * beta;
      const C m10 = r * binv;
      const C t00 = p00 * beta + p01 * m10;
      const C t01 = p00 * m01 + p01 * binv;
      const C t10 = p10 * beta + p11 * m10;
      const C t11 = p10 * m01 + p11 * binv;
      p00 = t00;
      p01 = t01;
      p10 = t10;
      p11 = t11;
    }
  }
  ws.p00 = p00;
  ws.p01 = p01;
  ws.p10 = p10;
  ws.p11 = p11;
  return norm2(p10) / norm2(p00);
}

// Accumulates seed * d(raw)/d(inputs) into adj given the stored forward pass.
inline void abeles_point_bwd(const slab_params<double>& p, double q,
                             const kernel_point_workspace& ws, double seed,
                             kernel_point_adjoint& adj, bool want_dq) {
  using C = cplx<double>;
  const std::size_t nifc = p.ninterfaces();
  const std::size_t nmedia = p.nmedia();

  thread_local std::vector<C> kbar;
  kbar.assign(nmedia, C(0.0));

  const C a = ws.p00;
  const C b = ws.p10;
  const double na = norm2(a);
  C bbar = b * (2.0 * seed / na);
  C abar = a * (-2.0 * seed * norm2(b) / (na * na));

  C q00 = abar, q01 = C(0.0), q10 = bbar, q11 = C(0.0);
  for (std::size_t ii = nifc; ii-- > 0;) {
    const C ki = ws.k[ii];
    const C kn = ws.k[ii + 1];
    const C f = ws.f[ii];
    const C nc = ws.nc[ii];
    const C r = f * nc;
    const C beta = ws.beta[ii];
    const C binv = ws.binv[ii];

    // Mbar = A^H * Pbar, using the prefix matrix A stored before this step
    const C A00 = ws.a00[ii], A01 = ws.a01[ii], A10 = ws.a10[ii], A11 = ws.a11[ii];
    const C mb00 = conj(A00) * q00 + conj(A10) * q10;
    const C mb01 = conj(A00) * q01 + conj(A10) * q11;
    const C mb10 = conj(A01) * q00 + conj(A11) * q10;
    const C mb11 = conj(A01) * q01 + conj(A11) * q11;

    // Pbar_prev = Pbar * M^H with M = [[beta, r*beta], [r*binv, binv]]
    const C m00 = beta, m01 = r * beta, m10 = r * binv, m11 = binv;
    const C n00 = q00 * conj(m00) + q01 * conj(m01);
    const C n01 = q00 * conj(m10) + q01 * conj(m11);
    const C n10 = q10 * conj(m00) + q11 * conj(m01);
    const C n11 = q10 * conj(m10) + q11 * conj(m11);
    q00 = n00;
    q01 = n01;
    q10 = n10;
    q11 = n11;

    C rbar = conj(beta) * mb01 + conj(binv) * mb10;
    if (ii > 0) {
      const double d = p.thick[ii - 1];
      const C betabar = mb00 + conj(r) * mb01;
      const C binvbar = conj(r) * mb10 + mb11;
      const C argbar = conj(beta) * betabar - conj(binv) * binvbar;
      // arg = i * ki * d
      kbar[ii] += C(0.0, -d) * argbar;
      adj.d_thick[ii - 1] += re_dot(C(-ki.im, ki.re), argbar);
    }

    // r = f * nc
    const C fbar = conj(nc) * rbar;
    const C ncbar = conj(f) * rbar;
    // nc = exp(w), w = -2 sigma^2 ki kn
    const C wbar = conj(nc) * ncbar;
    const double sg = p.rough[ii];
    adj.d_rough[ii] += re_dot(ki * kn * (-4.0 * sg), wbar);
    kbar[ii] += conj(kn * (-2.0 * sg * sg)) * wbar;
    kbar[ii + 1] += conj(ki * (-2.0 * sg * sg)) * wbar;
    // f = (ki - kn) / (ki + kn)
    const C den = ki + kn;
    const C den2 = den * den;
    kbar[ii] += conj(kn * 2.0 / den2) * fbar;
    kbar[ii + 1] += conj(ki * -2.0 / den2) * fbar;
  }

  // k[m] = sqrt(qq4 - contrast[m]); both inputs are real
  const double cscale = 4.0 * 3.141592653589793238462643 * sld_units;
  for (std::size_t m = 1; m < nmedia; ++m) {
    const C km = ws.k[m];
    const double n2 = norm2(km);
    if (n2 < 1e-300) continue;  // branch point; gradient undefined, drop
    const C zbar = conj(C(1.0) / (km * 2.0)) * kbar[m];
    const double zre = zbar.re;
    adj.d_sld[m] += -zre * cscale;
    adj.d_sld[0] += zre * cscale;
    if (want_dq) adj.d_q += zre * (q * 0.5);
  }
  if (want_dq) adj.d_q += 0.5 * kbar[0].re;
}

}  // namespace detail

}  // namespace reflgrad
