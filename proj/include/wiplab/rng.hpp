#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace wiplab {

using Rng = std::mt19937_64;

// Derives an independent generator seed from a root seed and a stream name,
// so that adding a consumer never perturbs the draws of another.
std::uint64_t substream_seed(std::uint64_t root, std::string_view name,
                             std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t root, std::string_view name,
                    std::uint64_t index = 0) {
  return Rng(substream_seed(root, name, index));
}

// Portable draws; the std:: distributions are implementation-defined.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
double standard_normal(Rng& rng);

}  // namespace wiplab
