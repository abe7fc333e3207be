#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrca/image.hpp"
#include "rrca/tensor.hpp"

namespace rrca {

enum class DataErrorKind { MissingFile, BadHeader, SizeMismatch, Io };

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

struct Sample {
  std::string id;
  ImageF image;  // [0, 1]
  Mask mask;     // {0, 1}
};

/// Binary 8-bit graymap ("P5"). Values are scaled by maxval.
Grid<std::uint8_t> read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Grid<std::uint8_t>& img);

/// Round-to-nearest 8-bit quantization of a [0, 1] image (clamped).
Grid<std::uint8_t> to_u8(const ImageF& img);
ImageF to_unit(const Grid<std::uint8_t>& img, int maxval = 255);

/// Ids listed in `root/splits/<split>.txt`, one per line; blank lines skipped.
std::vector<std::string> read_split(const std::filesystem::path& root, const std::string& split);

/// Loads `images/<id>.pgm` and `masks/<id>.pgm`; masks are binarized at 128.
std::vector<Sample> load_dataset(const std::filesystem::path& root,
                                 const std::vector<std::string>& ids);

/// Reflect-pads to at least `crop` per side, flips horizontally and vertically
/// with probability 0.5 each, then takes a uniform random `crop` x `crop`
/// window. Image and mask share the transform.
Sample augment(const Sample& s, std::uint64_t seed, int crop = 256);

/// Batches samples into (n, 1, h, w) image and label tensors.
std::pair<Tensor<float>, Tensor<float>> to_batch(const std::vector<const Sample*>& samples);

struct SynthConfig {
  int count = 250;
  int image_size = 128;
  int targets_min = 1;
  int targets_max = 3;
  double sigma_min = 1.2;
  double sigma_max = 2.5;
  double peak_min = 0.5;
  double peak_max = 1.0;
  /// Gaussian blur sigma (px) of the low-frequency clutter field.
  double clutter_smoothness = 6.0;
  /// Peak-to-peak amplitude of the clutter field.
  double clutter_level = 0.3;
  double noise_sigma = 0.02;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthTarget {
  double cy = 0;
  double cx = 0;
  double sigma = 0;
  double peak = 0;
};

/// One synthetic sample; deterministic in (cfg.seed, index).
Sample synth_sample(const SynthConfig& cfg, int index, std::vector<SynthTarget>* targets = nullptr);

/// Sample ids are zero-padded indices ("000017").
std::string synth_id(int index);

/// Writes images, masks and 80/20 split lists under `out_dir`.
void synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace rrca
