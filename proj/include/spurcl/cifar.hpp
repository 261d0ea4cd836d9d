#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "spurcl/error.hpp"

namespace spurcl::cifar {

inline constexpr std::size_t kHeight = 32;
inline constexpr std::size_t kWidth = 32;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kPixels = kHeight * kWidth * kChannels;  // 3072
inline constexpr std::size_t kRecordBytes = kPixels + 1;             // 3073

inline constexpr std::array<const char*, 10> kClassNames = {
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};

struct Record {
  int label = 0;
  std::vector<float> image;  // channel-planar, values in [0,1]
};

/// Parse a CIFAR-10 binary batch: 1 label byte followed by 1024 R, 1024 G
/// and 1024 B bytes per record.
inline std::vector<Record> read_batch(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kRecordBytes != 0) {
    throw FormatError("cifar10: length " + std::to_string(bytes.size()) +
                      " is not a multiple of " + std::to_string(kRecordBytes));
  }
  const std::size_t n = bytes.size() / kRecordBytes;
  std::vector<Record> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto rec = bytes.subspan(i * kRecordBytes, kRecordBytes);
    if (rec[0] > 9) {
      throw FormatError("cifar10: corrupt record " + std::to_string(i) + " (label byte " +
                        std::to_string(rec[0]) + ")");
    }
    Record r;
    r.label = rec[0];
    r.image.resize(kPixels);
    for (std::size_t p = 0; p < kPixels; ++p) r.image[p] = static_cast<float>(rec[p + 1]) / 255.0f;
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<Record> read_batch_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cifar10: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return read_batch(bytes);
}

/// Transportation means (airplane, automobile, horse, ship, truck) map to 1.
inline int binarize_label(int class_id) {
  if (class_id < 0 || class_id > 9) {
    throw DataError("cifar10: class id " + std::to_string(class_id) + " out of range 0..9");
  }
  switch (class_id) {
    case 0: case 1: case 7: case 8: case 9: return 1;
    default: return 0;
  }
}

/// Original classes that make up binary class `y`, in ascending order.
inline std::vector<int> modes_of_binary_class(int y) {
  std::vector<int> out;
  for (int c = 0; c < 10; ++c)
    if (binarize_label(c) == y) out.push_back(c);
  return out;
}

}  // namespace spurcl::cifar
