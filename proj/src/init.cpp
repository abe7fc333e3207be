#include "rrca/init.hpp"

#include <cmath>

#include "rrca/random.hpp"

namespace rrca {

Fans fans_of(const Shape& s) {
  validate_shape(s);
  const int field = s.h * s.w;
  return Fans{s.c * field, s.n * field};
}

template <typename T>
std::vector<T> xavier_init(const Shape& s, std::uint64_t seed,
                           std::string_view name) {
  const Fans f = fans_of(s);
  const double bound = std::sqrt(6.0 / (f.fan_in + f.fan_out));
  Rng rng(derive_seed(seed, name));
  std::vector<T> out(s.numel());
  for (T& v : out) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

template std::vector<float> xavier_init<float>(const Shape&, std::uint64_t, std::string_view);
template std::vector<double> xavier_init<double>(const Shape&, std::uint64_t, std::string_view);

}  // namespace rrca
