#include "txt/profiler.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

namespace txt {

namespace {

using u64 = std::uint64_t;

u64 conv_out(u64 in, u64 k, u64 stride, u64 pad) { return (in + 2 * pad - k) / stride + 1; }

u64 conv_macs(u64 h, u64 w, u64 k, u64 cin, u64 cout, u64 stride, u64 pad) {
  return conv_out(h, k, stride, pad) * conv_out(w, k, stride, pad) * k * k * cin * cout;
}

struct Dims {
  u64 d, heads, ffn, points;
};

u64 mha_macs(u64 nq, u64 nk, const Dims& m) { return nq * m.d * m.d + 2 * nk * m.d * m.d + 2 * nq * nk * m.d + nq * m.d * m.d; }

u64 ffn_macs(u64 n, const Dims& m) { return 2 * n * m.d * m.ffn; }

// value projection, offsets, logits, sampling, output projection
u64 deform_macs(u64 nq, u64 nv, u64 levels, const Dims& m, u64* sampling = nullptr) {
  const u64 samples = m.heads * levels * m.points;
  const u64 s = nq * samples * (m.d / m.heads) * 5;
  if (sampling) *sampling += s;
  return nv * m.d * m.d + nq * m.d * samples * 2 + nq * m.d * samples + s + nq * m.d * m.d;
}

}  // namespace

std::uint64_t FlopReport::macs(const std::string& component) const {
  auto it = components.find(component);
  return it == components.end() ? 0 : it->second;
}

nlohmann::json FlopReport::to_json() const {
  nlohmann::json comp = nlohmann::json::object(), flops_by = nlohmann::json::object();
  for (const auto& [k, v] : components) {
    comp[k] = v;
    flops_by[k] = 2 * v;
  }
  return {{"input", {height, width}}, {"components_macs", comp}, {"components_flops", flops_by},
          {"details_macs", details},  {"total_macs", total_macs}, {"total_flops", flops()},
          {"config", config}};
}

FlopReport count_flops(const DetectorConfig& config, std::size_t height, std::size_t width) {
  config.validate();
  if (height == 0 || width == 0 || height % 64 != 0 || width % 64 != 0)
    throw DimensionError("input extents must be positive multiples of 64");
  FlopReport r;
  r.config = config.to_json();
  r.height = height;
  r.width = width;
  const Dims m{config.attention.model_dim, config.attention.heads, config.attention.ffn_dim,
               config.attention.sampling_points};
  const auto& bw = config.backbone_widths;

  // Backbone stages; extents[s] is the (h, w) after stage s.
  std::array<std::array<u64, 2>, 4> ext{};
  u64 backbone = conv_macs(height, width, 4, 3, bw[0], 4, 0);
  ext[0] = {conv_out(height, 4, 4, 0), conv_out(width, 4, 4, 0)};
  for (std::size_t s = 1; s < 4; ++s) {
    backbone += conv_macs(ext[s - 1][0], ext[s - 1][1], 3, bw[s - 1], bw[s], 2, 1);
    ext[s] = {conv_out(ext[s - 1][0], 3, 2, 1), conv_out(ext[s - 1][1], 3, 2, 1)};
  }
  r.components["backbone"] = backbone;

  std::vector<std::array<u64, 2>> levels;
  u64 proj = 0;
  if (config.encoder_levels() == 1) {
    proj = ext[3][0] * ext[3][1] * bw[3] * m.d;
    levels.push_back(ext[3]);
  } else {
    for (std::size_t s = 1; s < 4; ++s) {
      proj += ext[s][0] * ext[s][1] * bw[s] * m.d;
      levels.push_back(ext[s]);
    }
    proj += conv_macs(ext[3][0], ext[3][1], 3, bw[3], m.d, 2, 1);
    levels.push_back({conv_out(ext[3][0], 3, 2, 1), conv_out(ext[3][1], 3, 2, 1)});
  }
  r.components["input_proj"] = proj;

  u64 all_tokens = 0;
  for (const auto& e : levels) all_tokens += e[0] * e[1];
  const u64 q = config.num_queries;
  u64 encoder = 0, decoder = 0, memory_tokens = 0, sampling = 0;
  if (config.kind == DetectorKind::kDetr) {
    const u64 n = all_tokens;
    for (std::size_t l = 0; l < config.encoder_layers; ++l) encoder += mha_macs(n, n, m) + ffn_macs(n, m);
    r.details["encoder.attention_scores"] = config.encoder_layers * 2 * n * n * m.d;
    for (std::size_t l = 0; l < config.decoder_layers; ++l)
      decoder += mha_macs(q, q, m) + mha_macs(q, n, m) + ffn_macs(q, m);
    memory_tokens = n;
  } else {
    const u64 nlev = levels.size();
    if (config.encoder.kind == EncoderVariant::Kind::kQueryStride) {
      const std::size_t li = static_cast<std::size_t>(
          std::find(DetectorConfig::kStrides.begin(), DetectorConfig::kStrides.end(), config.encoder.stride) -
          DetectorConfig::kStrides.begin());
      const u64 nq = levels.at(li)[0] * levels.at(li)[1];
      encoder += deform_macs(nq, all_tokens, nlev, m, &sampling) + ffn_macs(nq, m);
      for (std::size_t l = 1; l < config.encoder_layers; ++l)
        encoder += deform_macs(nq, nq, 1, m, &sampling) + ffn_macs(nq, m);
      memory_tokens = nq;
    } else {
      for (std::size_t l = 0; l < config.encoder_layers; ++l)
        encoder += deform_macs(all_tokens, all_tokens, nlev, m, &sampling) + ffn_macs(all_tokens, m);
      memory_tokens = all_tokens;
    }
    r.details["encoder.sampling"] = sampling;
    for (std::size_t l = 0; l < config.decoder_layers; ++l)
      decoder += mha_macs(q, q, m) + deform_macs(q, memory_tokens, config.decoder_levels(), m) + ffn_macs(q, m);
  }
  r.components["encoder"] = encoder;
  r.components["decoder"] = decoder;
  r.details["encoder.tokens"] = memory_tokens;

  u64 heads = q * m.d * config.class_outputs();
  heads += config.decoder_layers * q * (2 * m.d * m.d + m.d * 4);
  if (config.kind == DetectorKind::kDeformable) heads += q * m.d * 4;
  r.components["heads"] = heads;

  for (const auto& [k, v] : r.components) r.total_macs += v;
  return r;
}

std::string Attribution::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "object,cx,cy,w,h,score,salient\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    os << i;
    for (std::size_t c = 0; c < 4; ++c) os << ',' << boxes.at(i, c);
    os << ',' << scores[i] << ',' << (salient[i] ? 1 : 0) << '\n';
  }
  return os.str();
}

Attribution attribute_regions(const Tensor& object_features, const Tensor& boxes, const TokenSequence& question,
                              const LanguageModel& lm, std::size_t answer_index) {
  if (answer_index >= lm.config().answers) throw ContractError("answer index out of range");
  const Tensor features = object_features.detach();
  Tensor projection;
  const Tensor logits = lm.forward(question, features, boxes.detach(), &projection);
  sum(slice(logits, 0, answer_index, answer_index + 1)).backward();
  Attribution a;
  a.boxes = boxes.detach();
  const std::size_t n = projection.dim(0), d = projection.dim(1);
  a.scores.assign(n, 0.0);
  if (projection.has_grad()) {
    auto g = projection.grad();
    auto v = projection.data();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += g[i * d + j] * v[i * d + j];
      a.scores[i] = std::max(0.0, s);
    }
  }
  for (auto [name, p] : lm.parameters()) p.zero_grad();
  const double top = *std::max_element(a.scores.begin(), a.scores.end());
  if (top > 0.0) {
    for (double& s : a.scores) s /= top;
  } else {
    a.all_zero = true;
    std::cerr << "warning: attribution gradient is zero for every object\n";
  }
  for (double s : a.scores) a.salient.push_back(s > 0.9);
  return a;
}

Attribution region_attribution(const Detector& detector, const LanguageModel& lm, const Tensor& image,
                               const TokenSequence& question, std::size_t answer_index, const VqaTrainConfig& cfg) {
  ObjectInputs in;
  {
    NoGradGuard guard;
    in = object_inputs(detect(image, detector, cfg.context), cfg.mode, cfg.gate_threshold);
  }
  return attribute_regions(in.features, in.boxes, question, lm, answer_index);
}

}  // namespace txt
