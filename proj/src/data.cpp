#include "sepconv/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace sepconv {

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarRecord = 1 + 3 * kCifarDim * kCifarDim;

std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cifar10: cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<std::size_t>(len));
  if (!buf.empty()) f.read(reinterpret_cast<char*>(buf.data()), len);
  if (!f) throw std::runtime_error("cifar10: read failed on " + path);
  return buf;
}

}  // namespace

Dataset load_cifar10(const std::vector<std::string>& paths) {
  std::vector<std::vector<unsigned char>> files;
  std::size_t total = 0;
  for (const auto& p : paths) {
    files.push_back(read_all(p));
    if (files.back().size() % kCifarRecord != 0)
      throw std::runtime_error("cifar10: truncated file " + p + " (" +
                               std::to_string(files.back().size()) + " bytes is not a multiple of " +
                               std::to_string(kCifarRecord) + ")");
    total += files.back().size() / kCifarRecord;
  }
  Dataset ds;
  ds.name = "cifar10";
  ds.images = zeros(static_cast<int>(total), 3, kCifarDim, kCifarDim);
  ds.labels.reserve(total);
  std::size_t row = 0;
  for (const auto& buf : files) {
    for (std::size_t off = 0; off < buf.size(); off += kCifarRecord, ++row) {
      const unsigned char label = buf[off];
      if (label > 9)
        throw std::runtime_error("cifar10: label byte " + std::to_string(label) + " out of range");
      ds.labels.push_back(label);
      double* dst = ds.images.plane(static_cast<int>(row), 0);
      const unsigned char* src = buf.data() + off + 1;
      for (int i = 0; i < 3 * kCifarDim * kCifarDim; ++i) dst[i] = src[i] / 255.0;
    }
  }
  return ds;
}

void save_cifar10(const Dataset& ds, const std::string& path) {
  if (ds.images.c() != 3 || ds.images.h() != kCifarDim || ds.images.w() != kCifarDim)
    throw std::invalid_argument("cifar10: can only save (n, 3, 32, 32) images, got " +
                                ds.images.dims_str());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cifar10: cannot open " + path + " for writing");
  std::vector<unsigned char> rec(kCifarRecord);
  for (int i = 0; i < ds.n(); ++i) {
    rec[0] = static_cast<unsigned char>(ds.labels[static_cast<std::size_t>(i)]);
    const double* src = ds.images.plane(i, 0);
    for (int p = 0; p < 3 * kCifarDim * kCifarDim; ++p) {
      double v = std::round(src[p] * 255.0);
      if (v < 0.0) v = 0.0;
      if (v > 255.0) v = 255.0;
      rec[static_cast<std::size_t>(p) + 1] = static_cast<unsigned char>(v);
    }
    f.write(reinterpret_cast<const char*>(rec.data()), kCifarRecord);
  }
  if (!f) throw std::runtime_error("cifar10: write failed on " + path);
}

std::vector<int> shuffled_indices(int n, Prng& prng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = prng.next_index(i + 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

Dataset take(const Dataset& d, const std::vector<int>& idx) {
  Dataset out;
  out.name = d.name;
  out.images = zeros(static_cast<int>(idx.size()), d.images.c(), d.images.h(), d.images.w());
  out.labels.reserve(idx.size());
  const std::size_t row_len =
      static_cast<std::size_t>(d.images.c()) * d.images.h() * d.images.w();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int src = idx[i];
    if (src < 0 || src >= d.n()) throw std::invalid_argument("take: index out of range");
    std::memcpy(out.images.plane(static_cast<int>(i), 0), d.images.plane(src, 0),
                row_len * sizeof(double));
    out.labels.push_back(d.labels[static_cast<std::size_t>(src)]);
  }
  return out;
}

std::pair<Dataset, Dataset> sample_split(const Dataset& d, int n_train, int n_eval,
                                         std::uint64_t seed) {
  if (n_train < 0 || n_eval < 0 || n_train + n_eval > d.n())
    throw std::invalid_argument("sample_split: need n_train + n_eval <= " + std::to_string(d.n()) +
                                ", got " + std::to_string(n_train) + " + " + std::to_string(n_eval));
  Prng prng(seed);
  const std::vector<int> perm = shuffled_indices(d.n(), prng);
  const std::vector<int> train_idx(perm.begin(), perm.begin() + n_train);
  const std::vector<int> eval_idx(perm.begin() + n_train, perm.begin() + n_train + n_eval);
  return {take(d, train_idx), take(d, eval_idx)};
}

Dataset synthetic_dataset(int n, int classes, int h, int w, double noise, std::uint64_t seed) {
  if (classes < 1 || classes > 10)
    throw std::invalid_argument("synthetic: classes must be in [1, 10]");
  if (n < classes) throw std::invalid_argument("synthetic: need n >= classes");
  if (h < 1 || w < 1) throw std::invalid_argument("synthetic: image dims must be positive");
  if (noise < 0.0) throw std::invalid_argument("synthetic: noise must be >= 0");
  Dataset ds;
  ds.name = "synthetic";
  ds.images = zeros(n, 3, h, w);
  ds.labels.reserve(static_cast<std::size_t>(n));
  Prng prng(seed);
  const double inv = 1.0 / (h + w);
  for (int i = 0; i < n; ++i) {
    const int k = i % classes;
    ds.labels.push_back(k);
    const double freq = 2.0 * std::numbers::pi * (k + 1) * inv;
    for (int ch = 0; ch < 3; ++ch) {
      double* plane = ds.images.plane(i, ch);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double v = 0.5 + 0.5 * std::sin(freq * (x + y + ch)) + noise * prng.next_normal();
          if (v < 0.0) v = 0.0;
          if (v > 1.0) v = 1.0;
          plane[y * w + x] = v;
        }
    }
  }
  return ds;
}

}  // namespace sepconv
