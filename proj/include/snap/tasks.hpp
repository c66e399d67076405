#pragma once

// Training data: the curriculum Copy task, its fixed-length variant, and
// byte-level language-model crops.
//
// Copy layout for payload length l (total 2l + 2 steps), 4 input channels
// [bit, start, end, go]:
//   step 0            start flag
//   steps 1..l        payload bits on the bit channel
//   step l+1          end flag
//   steps l+2..2l+1   go cue held; the target is the payload bit

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace snap {

inline constexpr std::size_t kCopyChannels = 4;
inline constexpr std::size_t kCopyClasses = 2;
inline constexpr std::size_t kByteVocab = 256;

struct Sequence {
  std::vector<std::vector<double>> inputs;
  std::vector<int> targets;  // -1 where no loss is taken

  std::size_t length() const { return inputs.size(); }
  std::size_t target_count() const {
    return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](int t) { return t >= 0; }));
  }
};

inline Sequence make_copy_sequence(std::span<const int> bits) {
  const std::size_t l = bits.size();
  Sequence seq;
  seq.inputs.assign(2 * l + 2, std::vector<double>(kCopyChannels, 0.0));
  seq.targets.assign(2 * l + 2, -1);
  seq.inputs[0][1] = 1.0;
  for (std::size_t i = 0; i < l; ++i) seq.inputs[1 + i][0] = static_cast<double>(bits[i]);
  seq.inputs[l + 1][2] = 1.0;
  for (std::size_t i = 0; i < l; ++i) {
    seq.inputs[l + 2 + i][3] = 1.0;
    seq.targets[l + 2 + i] = bits[i];
  }
  return seq;
}

inline Sequence sample_copy_sequence(std::size_t payload_length, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<int> bits(payload_length);
  for (auto& b : bits) b = coin(rng) ? 1 : 0;
  return make_copy_sequence(bits);
}

class CopyCurriculum {
 public:
  static constexpr double kDefaultThreshold = 0.15;
  static constexpr std::size_t kWindow = 5;

  explicit CopyCurriculum(std::size_t start_length = 1, double threshold = kDefaultThreshold)
      : length_(start_length), threshold_(threshold) {
    if (start_length < 1) throw std::invalid_argument("curriculum length must be at least 1");
  }

  std::size_t length() const { return length_; }
  double threshold() const { return threshold_; }
  std::size_t min_length() const { return length_ > kWindow ? length_ - kWindow : 1; }

  // Advances L by one when the minibatch bpc is strictly below threshold.
  bool update(double batch_bpc) {
    if (batch_bpc < 0.0) throw std::invalid_argument("bpc cannot be negative");
    if (batch_bpc < threshold_) {
      ++length_;
      return true;
    }
    return false;
  }

 private:
  std::size_t length_;
  double threshold_;
};

// Payload lengths uniform in [max(L - 5, 1), L].
inline std::vector<Sequence> sample_copy_batch(const CopyCurriculum& curriculum, std::size_t batch,
                                               std::mt19937_64& rng) {
  if (batch < 1) throw std::invalid_argument("batch must be at least 1");
  std::uniform_int_distribution<std::size_t> len(curriculum.min_length(), curriculum.length());
  std::vector<Sequence> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) out.push_back(sample_copy_sequence(len(rng), rng));
  return out;
}

inline std::vector<Sequence> sample_copy_fixed_batch(std::size_t payload_length, std::size_t batch,
                                                     std::mt19937_64& rng) {
  std::vector<Sequence> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) out.push_back(sample_copy_sequence(payload_length, rng));
  return out;
}

inline std::vector<double> one_hot(std::uint8_t byte) {
  std::vector<double> v(kByteVocab, 0.0);
  v[byte] = 1.0;
  return v;
}

class ByteCorpus {
 public:
  ByteCorpus() = default;
  explicit ByteCorpus(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  explicit ByteCorpus(std::string_view text) : bytes_(text.begin(), text.end()) {}

  static ByteCorpus load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteCorpus(std::move(bytes));
  }

  std::size_t size() const { return bytes_.size(); }
  std::span<const std::uint8_t> bytes() const { return bytes_; }

  // Head for training, tail for validation.
  std::pair<ByteCorpus, ByteCorpus> split(double validation_fraction) const {
    const auto n_valid = static_cast<std::size_t>(static_cast<double>(bytes_.size()) * validation_fraction);
    const auto cut = bytes_.size() - n_valid;
    return {ByteCorpus(std::vector<std::uint8_t>(bytes_.begin(), bytes_.begin() + static_cast<std::ptrdiff_t>(cut))),
            ByteCorpus(std::vector<std::uint8_t>(bytes_.begin() + static_cast<std::ptrdiff_t>(cut), bytes_.end()))};
  }

  // Inputs bytes[offset, offset + crop), targets shifted by one.
  Sequence crop(std::size_t offset, std::size_t crop_len) const {
    if (offset + crop_len + 1 > bytes_.size()) throw std::out_of_range("crop runs past the end of the corpus");
    Sequence seq;
    seq.inputs.reserve(crop_len);
    for (std::size_t i = 0; i < crop_len; ++i) {
      seq.inputs.push_back(one_hot(bytes_[offset + i]));
      seq.targets.push_back(bytes_[offset + i + 1]);
    }
    return seq;
  }

  std::size_t max_offset(std::size_t crop_len) const { return bytes_.size() - crop_len - 1; }

 private:
  std::vector<std::uint8_t> bytes_;
};

inline std::size_t sample_crop_offset(const ByteCorpus& corpus, std::size_t crop_len, std::mt19937_64& rng) {
  if (corpus.size() <= crop_len) throw std::invalid_argument("corpus is too short for the crop length");
  std::uniform_int_distribution<std::size_t> pick(0, corpus.max_offset(crop_len));
  return pick(rng);
}

// Crops sampled uniformly with replacement; no state crosses a crop boundary.
inline std::vector<Sequence> sample_lm_batch(const ByteCorpus& corpus, std::size_t batch, std::size_t crop_len,
                                             std::mt19937_64& rng) {
  std::vector<Sequence> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) out.push_back(corpus.crop(sample_crop_offset(corpus, crop_len, rng), crop_len));
  return out;
}

inline double nats_to_bits(double nats) { return nats / std::log(2.0); }

}  // namespace snap
