#pragma once

// Minimal complex arithmetic over a generic real scalar type.
//
// std::complex<T> has undefined behaviour for non-floating-point T, so the
// reflectivity kernel uses this type instead; it works both for double and
// for the reverse-mode scalar in ad.hpp.

#include <cmath>

#include "reflgrad/scalar.hpp"

namespace reflgrad {

template <class T>
struct cplx {
  T re{0};
  T im{0};

  cplx() = default;
  cplx(T r) : re(std::move(r)) {}
  cplx(T r, T i) : re(std::move(r)), im(std::move(i)) {}
};

template <class T> cplx<T> operator+(const cplx<T>& a, const cplx<T>& b) {
  return {a.re + b.re, a.im + b.im};
}
template <class T> cplx<T> operator-(const cplx<T>& a, const cplx<T>& b) {
  return {a.re - b.re, a.im - b.im};
}
template <class T> cplx<T> operator-(const cplx<T>& a) { return {-a.re, -a.im}; }

template <class T> cplx<T> operator*(const cplx<T>& a, const cplx<T>& b) {
  return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
}
template <class T, class S> cplx<T> operator*(const cplx<T>& a, const S& s) {
  return {a.re * s, a.im * s};
}
template <class T, class S> cplx<T> operator*(const S& s, const cplx<T>& a) {
  return {a.re * s, a.im * s};
}

template <class T> cplx<T>& operator+=(cplx<T>& a, const cplx<T>& b) {
  a.re += b.re;
  a.im += b.im;
  return a;
}
template <class T> cplx<T>& operator-=(cplx<T>& a, const cplx<T>& b) {
  a.re -= b.re;
  a.im -= b.im;
  return a;
}

// squared modulus
template <class T> T norm2(const cplx<T>& a) { return a.re * a.re + a.im * a.im; }

template <class T> cplx<T> conj(const cplx<T>& a) { return {a.re, -a.im}; }

template <class T> cplx<T> operator/(const cplx<T>& a, const cplx<T>& b) {
  T d = norm2(b);
  return {(a.re * b.re + a.im * b.im) / d, (a.im * b.re - a.re * b.im) / d};
}
template <class T, class S> cplx<T> operator/(const cplx<T>& a, const S& s) {
  return {a.re / s, a.im / s};
}

// Principal square root folded into the upper half plane (Im >= 0), the
// physical branch for evanescent wavevectors.  The argument produced by the
// kernel is real whenever absorption is absent, so that path is kept cheap.
template <class T>
cplx<T> csqrt_upper(const cplx<T>& z) {
  using std::sqrt;
  using std::fabs;
  if (value_of(z.im) == 0.0) {
    if (value_of(z.re) >= 0.0) return {sqrt(z.re), T(0)};
    return {T(0), sqrt(-z.re)};
  }
  // |z| via hypot-style stable evaluation
  T m = sqrt(norm2(z));
  T u = sqrt((m + z.re) * 0.5);
  T v = sqrt((m - z.re) * 0.5);
  if (value_of(z.im) < 0.0) { u = -u; }  // sign(v) follows Im(z); flip so Im >= 0
  return {u, v};
}

template <class T>
cplx<T> cexp(const cplx<T>& z) {
  using std::exp;
  using std::sin;
  using std::cos;
  T m = exp(z.re);
  return {m * cos(z.im), m * sin(z.im)};
}

}  // namespace reflgrad
