#pragma once
// Dataset handling: CIFAR-10 binary records, deterministic subset
// splitting, and a synthetic sinusoid dataset so experiments run with zero
// downloads. Images are (n, 3, h, w) with values in [0, 1], labels 0..9.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sepconv/tensor.hpp"

namespace sepconv {

struct Dataset {
  std::string name;
  Tensor4 images;
  std::vector<int> labels;

  int n() const { return images.n(); }
};

// Record format: 3073 bytes, byte 0 = label, then R/G/B planes of 1024
// bytes each, row-major 32x32; pixel = byte / 255. Multiple files
// concatenate in argument order. Throws on a length not divisible by 3073
// or a label byte > 9.
Dataset load_cifar10(const std::vector<std::string>& paths);

// Writes the same record format, quantizing pixels to round(v * 255).
void save_cifar10(const Dataset& ds, const std::string& path);

// Fisher-Yates permutation of 0..n-1 driven by the given Prng.
std::vector<int> shuffled_indices(int n, Prng& prng);

// Rows of d selected by idx, in idx order.
Dataset take(const Dataset& d, const std::vector<int>& idx);

// Shuffles 0..n-1 with Prng(seed); first n_train indices form the train
// set, the next n_eval the eval set (disjoint by construction).
std::pair<Dataset, Dataset> sample_split(const Dataset& d, int n_train, int n_eval,
                                         std::uint64_t seed);

// Label-k image: channel ch pixel (y, x) =
//   0.5 + 0.5*sin(2*pi*(k+1)*(x + y + ch)/(h + w)) + normal(0, noise),
// clipped to [0, 1]; labels assigned round-robin. The noise draw is
// consumed for every pixel even at noise == 0, so the stream position is
// independent of the noise setting.
Dataset synthetic_dataset(int n, int classes, int h, int w, double noise, std::uint64_t seed);

}  // namespace sepconv
