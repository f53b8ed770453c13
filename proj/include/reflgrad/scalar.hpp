#pragma once

#include <concepts>
#include <span>
#include <type_traits>

namespace reflgrad {

// Plain numeric value of a scalar, so templated numeric code can branch on
// current values; AD scalar types expose val().
template <class T>
constexpr double value_of(const T& x) {
  if constexpr (std::is_arithmetic_v<T>)
    return static_cast<double>(x);
  else
    return x.val();
}

// A differentiable scalar field: callable on spans of any scalar type the
// library evaluates with (plain doubles and reverse-mode variables).
template <class F, class S>
concept scalar_field_over =
    requires(F f, std::span<const S> xs) {
      { f(xs) } -> std::convertible_to<S>;
    };

}  // namespace reflgrad
