#pragma once

// DETR-style set-prediction detector with a convolutional backbone stub, a
// standard or scalable deformable encoder, query-based decoder, class and box
// heads, iterative box refinement and global-context augmentation.

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "txt/attention.hpp"

namespace txt {

enum class DetectorKind { kDetr, kDeformable };
enum class ContextMode { kNone, kBackbone, kProjectedBackbone, kEncoder };
enum class ClassLossKind { kCrossEntropy, kFocal };

std::string to_string(DetectorKind kind);
std::string to_string(ContextMode mode);
std::string to_string(ClassLossKind kind);
ContextMode parse_context_mode(std::string_view text);

/// Encoder flavour of the deformable detector.
struct EncoderVariant {
  enum class Kind { kMultiScale, kQueryStride, kSingleScale };
  Kind kind = Kind::kQueryStride;
  int stride = 16;

  static EncoderVariant multi_scale() { return {Kind::kMultiScale, kAllScales}; }
  static EncoderVariant query_stride(int s) { return {Kind::kQueryStride, s}; }
  /// Only the stride-32 map, in every encoder and decoder layer.
  static EncoderVariant single_scale() { return {Kind::kSingleScale, 32}; }

  std::string name() const;
  static EncoderVariant parse(std::string_view text);
  bool operator==(const EncoderVariant&) const = default;
};

struct DetectorConfig {
  DetectorKind kind = DetectorKind::kDeformable;
  /// Output widths of the stride 4, 8, 16 and 32 backbone stages.
  std::array<std::size_t, 4> backbone_widths{64, 256, 1024, 2048};
  AttentionConfig attention{};
  std::size_t encoder_layers = 6;
  std::size_t decoder_layers = 6;
  std::size_t num_queries = 100;
  std::size_t num_classes = 80;
  EncoderVariant encoder = EncoderVariant::query_stride(16);
  bool box_refinement = true;
  ClassLossKind loss = ClassLossKind::kCrossEntropy;
  ContextMode context = ContextMode::kEncoder;

  static DetectorConfig detr();
  static DetectorConfig deformable();

  static constexpr std::array<int, 4> kStrides{8, 16, 32, 64};

  std::size_t class_outputs() const { return loss == ClassLossKind::kCrossEntropy ? num_classes + 1 : num_classes; }
  std::size_t context_width(ContextMode mode) const;
  /// Width of an extracted per-object feature under `mode`.
  std::size_t feature_width(ContextMode mode) const { return attention.model_dim + context_width(mode); }
  /// Scales fed to the encoder and sampled by the decoder.
  std::size_t encoder_levels() const;
  std::size_t decoder_levels() const;
  void validate() const;

  nlohmann::json to_json() const;
  static DetectorConfig from_json(const nlohmann::json& j);
};

struct Conv2d {
  Tensor weight;  // [k, k, in, out]
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d kaiming(std::size_t k, std::size_t in, std::size_t out, std::size_t stride, std::size_t padding,
                        Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BackboneWeights {
  std::array<Conv2d, 4> stages;    // strides 4, 8, 16, 32
  std::vector<Linear> input_proj;  // 1x1 projections to model width, one per projected stage
  std::vector<int> proj_strides;   // stride of each projection's source stage
  std::optional<Conv2d> extra;     // stride-64 map from the raw stride-32 stage
  std::vector<Tensor> level_embeddings;

  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BackboneOutput {
  Tensor stage32;  // raw stride-32 stage [H/32, W/32, backbone width]
  FeatureMapSet maps;
};

/// Runs the convolutional stack and projects the selected stages to the
/// model width. Input height and width must be multiples of 64.
BackboneOutput backbone_stub(const Tensor& image, const BackboneWeights& w);

/// Three affine layers, ReLU between them; raw output before the sigmoid.
struct BoxHead {
  Linear fc1;
  Linear fc2;
  Linear fc3;

  static BoxHead xavier(std::size_t width, Rng& rng);
  Tensor raw(const Tensor& x) const { return fc3(relu(fc2(relu(fc1(x))))); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Normalized (cx, cy, w, h) boxes from decoder features.
Tensor bbox_head(const Tensor& decoder_output, const BoxHead& head);

/// sigmoid(head(output) + inverse_sigmoid(reference)).
Tensor refine_step(const Tensor& layer_output, const Tensor& reference, const BoxHead& head);

/// Box estimate after every layer; layer l refines the detached estimate of
/// layer l-1, starting from `initial_reference`.
std::vector<Tensor> iterative_box_refinement(const std::vector<Tensor>& layer_outputs,
                                             const Tensor& initial_reference, const std::vector<BoxHead>& heads);

struct DetectionSet {
  Tensor features;      // [Q, D] or [Q, D + context]
  Tensor class_logits;  // [Q, C + 1] (cross-entropy) or [Q, C] (focal)
  Tensor boxes;         // [Q, 4] normalized (cx, cy, w, h)
  Tensor confidence;    // [Q]
  ClassLossKind loss = ClassLossKind::kCrossEntropy;

  std::size_t size() const { return boxes.defined() ? boxes.dim(0) : 0; }
  /// Subset of rows in the given order.
  DetectionSet select(const std::vector<std::size_t>& rows) const;
};

/// Max real-class softmax probability (cross-entropy) or max sigmoid (focal).
Tensor detection_confidence(const Tensor& class_logits, ClassLossKind loss);

struct DetectorWeights {
  BackboneWeights backbone;
  ScalableEncoderWeights deformable_encoder;
  std::vector<EncoderLayerWeights> detr_encoder;
  LayerNormWeights detr_encoder_norm;
  std::vector<DeformableDecoderLayerWeights> deformable_decoder;
  std::vector<DecoderLayerWeights> detr_decoder;
  LayerNormWeights decoder_norm;
  Tensor query_content;  // [Q, D]
  Tensor query_pos;      // [Q, D]
  Linear reference_head;  // query_pos -> initial (cx, cy, w, h) logits
  Linear class_head;
  std::vector<BoxHead> box_heads;  // one per decoder layer with refinement, else one
};

struct DetectorOutput {
  DetectionSet detections;  // features without context
  std::vector<Tensor> layer_outputs;
  std::vector<Tensor> layer_boxes;
  Tensor backbone_stage32;
  Tensor projected_stage32;
  EncodedMemory memory;
};

class Detector {
 public:
  Detector(DetectorConfig config, std::uint64_t seed);

  const DetectorConfig& config() const { return config_; }
  DetectorWeights& weights() { return weights_; }
  const DetectorWeights& weights() const { return weights_; }

  DetectorOutput forward(const Tensor& image) const;

  NamedTensors parameters() const;
  NamedTensors backbone_parameters() const;
  NamedTensors class_head_parameters() const;
  /// Everything except the backbone stages and the class head.
  NamedTensors body_parameters() const;

 private:
  DetectorConfig config_;
  DetectorWeights weights_;
};

/// Which pooled source each context mode reads; absent entries are undefined.
struct ContextSources {
  Tensor backbone;            // raw stride-32 stage
  Tensor projected_backbone;  // stride-32 stage after projection
  Tensor encoder;             // encoder output tokens

  static ContextSources of(const DetectorOutput& out);
};

/// Concatenates the spatial mean of the selected source to every object
/// feature. kNone returns the set unchanged.
DetectionSet append_global_context(const DetectionSet& det, const ContextSources& sources, ContextMode mode);

/// Forward pass plus context augmentation.
DetectionSet detect(const Tensor& image, const Detector& model, ContextMode mode);

}  // namespace txt
