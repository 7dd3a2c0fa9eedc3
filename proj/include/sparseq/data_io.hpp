#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparseq/numerics.hpp"
#include "sparseq/vit_model.hpp"

namespace sparseq {

// Read access to a training split. The pipeline only sees data through this
// interface, so label reads can be observed.
class TrainingSet {
 public:
  virtual ~TrainingSet() = default;
  virtual const Tensor4& images() const = 0;
  virtual std::size_t classes() const = 0;
  virtual bool has_labels() const = 0;
  virtual std::size_t label(std::size_t i) const = 0;
  std::size_t size() const { return images().n; }
};

struct Dataset : TrainingSet {
  Tensor4 images_;
  std::vector<std::size_t> labels;  // empty when unlabeled
  std::size_t num_classes = 0;
  std::string split;

  const Tensor4& images() const override { return images_; }
  std::size_t classes() const override { return num_classes; }
  bool has_labels() const override { return !labels.empty(); }
  std::size_t label(std::size_t i) const override;
  void validate() const;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Parses IDX unsigned-byte files; pixel p becomes p / 255.
Dataset parse_idx(std::span<const std::uint8_t> images, std::optional<std::span<const std::uint8_t>> labels,
                  std::size_t classes = 10);
Dataset load_idx(const std::filesystem::path& images_path, const std::optional<std::filesystem::path>& labels_path,
                 std::size_t classes = 10);

// Zero-pads every image to h x w, centred (28 -> 32 adds 2 on each side).
Tensor4 pad_images(const Tensor4& x, std::size_t h, std::size_t w);

// Class-conditional Gaussian-blob images, one channel, values in [0, 1].
Dataset synth_dataset(Rng& rng, std::size_t classes, std::size_t n, std::size_t h, std::size_t w);

// Rows `idx` of x, in order.
Tensor4 gather(const Tensor4& x, std::span<const std::size_t> idx);

// Checkpoint container (see docs/formats.md).
inline constexpr std::uint8_t kCheckpointVersion = 1;
std::vector<std::uint8_t> encode_checkpoint(const ViTModel& model);
ViTModel decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ViTModel& model, const std::filesystem::path& path);
ViTModel load_checkpoint(const std::filesystem::path& path);

}  // namespace sparseq
