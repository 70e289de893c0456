// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "avsal/ops.hpp"
#include "avsal/rng.hpp"

// The saliency network: a strided 3-D conv visual branch with four tapped
// stages, a strided 1-D conv audio branch, one of three fusion blocks
// (cross-modal attention / concatenation / low-rank bilinear gating), a
// six-layer decoder with temporal skip concatenations, and two
// gradient-reversal domain discriminators.

namespace avsal {

enum class FusionMode { cross_modal, concat_fusion, bilinear };
enum class DaMode { none, audio, audio_fusion };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::cross_modal: return "cm";
    case FusionMode::concat_fusion: return "concat";
    case FusionMode::bilinear: return "bilinear";
  }
  return "?";
}

inline const char* to_string(DaMode m) {
  switch (m) {
    case DaMode::none: return "none";
    case DaMode::audio: return "audio";
    case DaMode::audio_fusion: return "audio+fusion";
  }
  return "?";
}

/// Temporal length after the audio encoder stack: four stride-4 same-padded
/// convolutions followed by one 2-tap valid convolution.
inline std::int64_t audio_output_len(std::int64_t audio_len) {
  std::int64_t t = audio_len;
  for (int i = 0; i < 4; ++i) t = (t + 3) / 4;
  return t - 1;
}

struct ModelConfig {
  std::int64_t base_channels = 64;  // c
  std::int64_t frames = 16;         // F0
  std::int64_t height = 64;         // H0
  std::int64_t width = 64;          // W0
  std::int64_t audio_len = 1024;    // T_a
  std::int64_t fusion_dim = 32;     // d = d_V = d_A = d_k = d_v
  FusionMode fusion_mode = FusionMode::cross_modal;
  double grl_lambda = 1.0;

  std::int64_t feat_frames() const { return frames / 8; }    // F
  std::int64_t feat_height() const { return height / 32; }   // H
  std::int64_t feat_width() const { return width / 32; }     // W
  std::int64_t visual_tokens() const { return feat_height() * feat_width(); }  // T_V

  void validate() const {
    detail::require(base_channels >= 8 && base_channels % 8 == 0,
                    "ModelConfig: base_channels must be a positive multiple of 8");
    detail::require(frames >= 8 && frames % 8 == 0, "ModelConfig: frames must be a multiple of 8");
    detail::require(height >= 32 && height % 32 == 0 && width >= 32 && width % 32 == 0,
                    "ModelConfig: height and width must be multiples of 32");
    detail::require(fusion_dim >= 1, "ModelConfig: fusion_dim must be >= 1");
    detail::require(grl_lambda >= 0.0, "ModelConfig: grl_lambda must be >= 0");
    detail::require(audio_output_len(audio_len) == 3,
                    "ModelConfig: audio_len must map to an encoded length of exactly 3");
  }
};

/// Feature-map shape produced by the visual branch for a given config.
struct FeatureShape {
  std::int64_t channels, frames, height, width;
};

inline FeatureShape visual_output_shape(const ModelConfig& cfg) {
  return {cfg.base_channels, cfg.frames / 8, cfg.height / 32, cfg.width / 32};
}

namespace detail {
// Per-stage strides of the visual encoder: /8 temporal, /32 spatial overall.
inline constexpr std::array<std::array<std::int64_t, 3>, 5> kVisualStrides{
    {{1, 2, 2}, {2, 2, 2}, {2, 2, 2}, {2, 2, 2}, {1, 2, 2}}};

inline std::int64_t visual_stage_channels(std::int64_t c, int stage) {
  // 3 -> c/8 -> c/4 -> c/2 -> c -> c
  switch (stage) {
    case 0: return c / 8;
    case 1: return c / 4;
    case 2: return c / 2;
    default: return c;
  }
}
}  // namespace detail

template <typename T>
struct SaliencyModel {
  ModelConfig cfg;

  std::array<Tensor<T>, 5> vis_w, vis_b;
  std::array<Tensor<T>, 5> aud_w, aud_b;

  // cross-modal fusion
  Tensor<T> vis_proj_w, vis_proj_b;  // 1-D conv c -> d over the token axis
  Tensor<T> aud_proj_w, aud_proj_b;
  Tensor<T> attn_wq, attn_wk, attn_wv;  // [d, d]
  Tensor<T> fc_w, fc_b;                 // output FC after attention
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Tensor<T> reinject_w, reinject_b;  // [d, c] projection back to channels

  // concat fusion
  Tensor<T> concat_w, concat_b;  // 1x1x1 conv 2c -> c

  // bilinear fusion
  Tensor<T> bl_v_w, bl_a_w;        // [c, d]
  Tensor<T> bl_gate_w, bl_gate_b;  // [d, c]

  std::array<Tensor<T>, 7> dec_w, dec_b;

  std::array<Tensor<T>, 3> da_conv_w, da_conv_b;    // audio discriminator
  std::array<Tensor<T>, 3> da_fc_w, da_fc_b;
  std::array<Tensor<T>, 3> dav_conv_w, dav_conv_b;  // audio-visual discriminator
  std::array<Tensor<T>, 3> dav_fc_w, dav_fc_b;

  /// Named parameter handles in a fixed declaration order; this order is the
  /// checkpoint layout.
  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> ps;
    for (int i = 0; i < 5; ++i) {
      ps.emplace_back("vis_w" + std::to_string(i), vis_w[i]);
      ps.emplace_back("vis_b" + std::to_string(i), vis_b[i]);
    }
    for (int i = 0; i < 5; ++i) {
      ps.emplace_back("aud_w" + std::to_string(i), aud_w[i]);
      ps.emplace_back("aud_b" + std::to_string(i), aud_b[i]);
    }
    switch (cfg.fusion_mode) {
      case FusionMode::cross_modal:
        ps.emplace_back("vis_proj_w", vis_proj_w);
        ps.emplace_back("vis_proj_b", vis_proj_b);
        ps.emplace_back("aud_proj_w", aud_proj_w);
        ps.emplace_back("aud_proj_b", aud_proj_b);
        ps.emplace_back("attn_wq", attn_wq);
        ps.emplace_back("attn_wk", attn_wk);
        ps.emplace_back("attn_wv", attn_wv);
        ps.emplace_back("fc_w", fc_w);
        ps.emplace_back("fc_b", fc_b);
        ps.emplace_back("mlp_w1", mlp_w1);
        ps.emplace_back("mlp_b1", mlp_b1);
        ps.emplace_back("mlp_w2", mlp_w2);
        ps.emplace_back("mlp_b2", mlp_b2);
        ps.emplace_back("reinject_w", reinject_w);
        ps.emplace_back("reinject_b", reinject_b);
        break;
      case FusionMode::concat_fusion:
        ps.emplace_back("concat_w", concat_w);
        ps.emplace_back("concat_b", concat_b);
        break;
      case FusionMode::bilinear:
        ps.emplace_back("bl_v_w", bl_v_w);
        ps.emplace_back("bl_a_w", bl_a_w);
        ps.emplace_back("bl_gate_w", bl_gate_w);
        ps.emplace_back("bl_gate_b", bl_gate_b);
        break;
    }
    for (int i = 0; i < 7; ++i) {
      ps.emplace_back("dec_w" + std::to_string(i), dec_w[i]);
      ps.emplace_back("dec_b" + std::to_string(i), dec_b[i]);
    }
    for (int i = 0; i < 3; ++i) {
      ps.emplace_back("da_conv_w" + std::to_string(i), da_conv_w[i]);
      ps.emplace_back("da_conv_b" + std::to_string(i), da_conv_b[i]);
    }
    for (int i = 0; i < 3; ++i) {
      ps.emplace_back("da_fc_w" + std::to_string(i), da_fc_w[i]);
      ps.emplace_back("da_fc_b" + std::to_string(i), da_fc_b[i]);
    }
    for (int i = 0; i < 3; ++i) {
      ps.emplace_back("dav_conv_w" + std::to_string(i), dav_conv_w[i]);
      ps.emplace_back("dav_conv_b" + std::to_string(i), dav_conv_b[i]);
    }
    for (int i = 0; i < 3; ++i) {
      ps.emplace_back("dav_fc_w" + std::to_string(i), dav_fc_w[i]);
      ps.emplace_back("dav_fc_b" + std::to_string(i), dav_fc_b[i]);
    }
    return ps;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  void zero_grads() const {
    for (auto& [name, t] : parameters()) t.zero_grad();
  }

  /// Fan-in-scaled uniform initialization, deterministic in `seed`.
  static SaliencyModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SaliencyModel m;
    m.cfg = cfg;
    Rng rng(seed);
    const std::int64_t c = cfg.base_channels, d = cfg.fusion_dim;

    // He-style bound for layers feeding a rectifier, plain fan-in bound for
    // layers feeding a sigmoid/residual head.
    const auto he = [&](Shape s, std::int64_t fan_in) {
      return Tensor<T>::uniform(std::move(s), static_cast<T>(std::sqrt(6.0 / double(fan_in))), rng,
                                true);
    };
    const auto head = [&](Shape s, std::int64_t fan_in) {
      return Tensor<T>::uniform(std::move(s), static_cast<T>(std::sqrt(3.0 / double(fan_in))), rng,
                                true);
    };
    const auto zeros = [&](Shape s) { return Tensor<T>(std::move(s), true); };

    std::int64_t in_ch = 3;
    for (int i = 0; i < 5; ++i) {
      const std::int64_t out_ch = detail::visual_stage_channels(c, i);
      m.vis_w[i] = he({out_ch, in_ch, 3, 3, 3}, in_ch * 27);
      m.vis_b[i] = zeros({out_ch});
      in_ch = out_ch;
    }

    in_ch = 1;
    for (int i = 0; i < 4; ++i) {
      const std::int64_t out_ch = detail::visual_stage_channels(c, i);
      m.aud_w[i] = he({out_ch, in_ch, 9}, in_ch * 9);
      m.aud_b[i] = zeros({out_ch});
      in_ch = out_ch;
    }
    m.aud_w[4] = he({c, in_ch, 2}, in_ch * 2);
    m.aud_b[4] = zeros({c});

    switch (cfg.fusion_mode) {
      case FusionMode::cross_modal:
        m.vis_proj_w = head({d, c, 1}, c);
        m.vis_proj_b = zeros({d});
        m.aud_proj_w = head({d, c, 1}, c);
        m.aud_proj_b = zeros({d});
        m.attn_wq = head({d, d}, d);
        m.attn_wk = head({d, d}, d);
        m.attn_wv = head({d, d}, d);
        m.fc_w = head({d, d}, d);
        m.fc_b = zeros({d});
        m.mlp_w1 = he({d, 4 * d}, d);
        m.mlp_b1 = zeros({4 * d});
        m.mlp_w2 = head({4 * d, d}, 4 * d);
        m.mlp_b2 = zeros({d});
        m.reinject_w = head({d, c}, d);
        m.reinject_b = zeros({c});
        break;
      case FusionMode::concat_fusion:
        m.concat_w = he({c, 2 * c, 1, 1, 1}, 2 * c);
        m.concat_b = zeros({c});
        break;
      case FusionMode::bilinear:
        m.bl_v_w = head({c, d}, c);
        m.bl_a_w = head({c, d}, c);
        m.bl_gate_w = head({d, c}, d);
        m.bl_gate_b = zeros({c});
        break;
    }

    const std::array<std::int64_t, 7> dec_in{c, c, c / 2, c / 4, c / 8, c / 8, 1};
    const std::array<std::int64_t, 7> dec_out{c, c / 2, c / 4, c / 8, c / 8, 1, 1};
    for (int i = 0; i < 6; ++i) {
      m.dec_w[i] = he({dec_out[i], dec_in[i], 3, 3, 3}, dec_in[i] * 27);
      m.dec_b[i] = zeros({dec_out[i]});
    }
    // temporal projection to a single frame, pre-sigmoid
    m.dec_w[6] = head({1, 1, cfg.frames, 1, 1}, cfg.frames);
    m.dec_b[6] = zeros({1});

    const auto init_disc_convs = [&](std::array<Tensor<T>, 3>& ws, std::array<Tensor<T>, 3>& bs,
                                     bool volumetric) {
      std::int64_t ic = c;
      for (int i = 0; i < 3; ++i) {
        const std::int64_t oc = ic / 2;
        ws[i] = volumetric ? he({oc, ic, 1, 1, 1}, ic) : he({oc, ic, 1}, ic);
        bs[i] = zeros({oc});
        ic = oc;
      }
    };
    const auto init_disc_fcs = [&](std::array<Tensor<T>, 3>& ws, std::array<Tensor<T>, 3>& bs) {
      const std::array<std::int64_t, 4> dims{c / 8, 64, 16, 1};
      for (int i = 0; i < 3; ++i) {
        ws[i] = i < 2 ? he({dims[i], dims[i + 1]}, dims[i]) : head({dims[i], dims[i + 1]}, dims[i]);
        bs[i] = zeros({dims[i + 1]});
      }
    };
    init_disc_convs(m.da_conv_w, m.da_conv_b, false);
    init_disc_fcs(m.da_fc_w, m.da_fc_b);
    init_disc_convs(m.dav_conv_w, m.dav_conv_b, true);
    init_disc_fcs(m.dav_fc_w, m.dav_fc_b);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

template <typename T>
struct VisualFeatures {
  Tensor<T> out;                  // O_V [c, F, H, W]
  std::array<Tensor<T>, 4> taps;  // stage 1..4 outputs for decoder skips
};

template <typename T>
VisualFeatures<T> visual_encoder(const SaliencyModel<T>& m, const Tensor<T>& video) {
  const auto& cfg = m.cfg;
  detail::require(video.rank() == 4 && video.dim(0) == 3 && video.dim(1) == cfg.frames &&
                      video.dim(2) == cfg.height && video.dim(3) == cfg.width,
                  "visual_encoder: video shape mismatch, want [3," + std::to_string(cfg.frames) +
                      "," + std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "]");
  VisualFeatures<T> vf;
  Tensor<T> h = video;
  for (int i = 0; i < 5; ++i) {
    h = relu(conv3d(h, m.vis_w[i], detail::kVisualStrides[i], Pad::same, m.vis_b[i]));
    if (i < 4) vf.taps[static_cast<std::size_t>(i)] = h;
  }
  vf.out = h;
  return vf;
}

template <typename T>
Tensor<T> audio_encoder(const SaliencyModel<T>& m, const Tensor<T>& audio) {
  detail::require(audio.rank() == 2 && audio.dim(0) == 1 && audio.dim(1) == m.cfg.audio_len,
                  "audio_encoder: audio shape mismatch, want [1," +
                      std::to_string(m.cfg.audio_len) + "]");
  Tensor<T> h = audio;
  for (int i = 0; i < 4; ++i) h = relu(conv1d(h, m.aud_w[i], 4, Pad::same, m.aud_b[i]));
  h = relu(conv1d(h, m.aud_w[4], 1, Pad::valid, m.aud_b[4]));
  return h;  // [c, 3]
}

template <typename T>
struct AttentionResult {
  Tensor<T> output;   // Y [T_V, d]
  Tensor<T> weights;  // row-stochastic [T_V, T_A]
};

/// Scaled dot-product attention with visual queries and audio keys/values:
/// Y = softmax(Q K^T / sqrt(d_k)) V.
template <typename T>
AttentionResult<T> cross_modal_attention(const SaliencyModel<T>& m, const Tensor<T>& x_v,
                                         const Tensor<T>& x_a) {
  const std::int64_t d = m.cfg.fusion_dim;
  detail::require(x_v.rank() == 2 && x_v.dim(1) == d, "cross_modal_attention: X_V must be [T_V,d]");
  detail::require(x_a.rank() == 2 && x_a.dim(1) == d, "cross_modal_attention: X_A must be [T_A,d]");
  auto q = matmul(x_v, m.attn_wq);
  auto k = matmul(x_a, m.attn_wk);
  auto v = matmul(x_a, m.attn_wv);
  auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(double(d))));
  auto w = softmax(scores);
  return {matmul(w, v), w};
}

/// Fuses encoder outputs into O_AV [c, F, H, W] according to the fusion mode.
/// In cross-modal mode the fused token map is projected back to channels,
/// reshaped onto the spatial grid, broadcast over frames and added to O_V.
template <typename T>
Tensor<T> fuse(const SaliencyModel<T>& m, const VisualFeatures<T>& vis, const Tensor<T>& audio_feat,
               Tensor<T>* attention_weights = nullptr) {
  const auto& cfg = m.cfg;
  const std::int64_t c = cfg.base_channels;
  const std::int64_t f = cfg.feat_frames(), fh = cfg.feat_height(), fw = cfg.feat_width();
  switch (cfg.fusion_mode) {
    case FusionMode::cross_modal: {
      auto pooled = maxpool_temporal(vis.out);                     // [c, H, W]
      auto flat = reshape(pooled, {c, fh * fw});                   // [c, T_V]
      auto xv = transpose(conv1d(flat, m.vis_proj_w, 1, Pad::same, m.vis_proj_b));  // [T_V, d]
      auto xa = transpose(conv1d(audio_feat, m.aud_proj_w, 1, Pad::same, m.aud_proj_b));
      auto attn = cross_modal_attention(m, xv, xa);
      if (attention_weights) *attention_weights = attn.weights;
      auto z = add(xv, linear(attn.output, m.fc_w, m.fc_b));
      auto h = relu(linear(z, m.mlp_w1, m.mlp_b1));
      auto z2 = add(z, linear(h, m.mlp_w2, m.mlp_b2));
      auto r = reshape(transpose(linear(z2, m.reinject_w, m.reinject_b)), {c, fh, fw});
      return add(vis.out, broadcast_frames(r, f));
    }
    case FusionMode::concat_fusion: {
      auto a_vol = broadcast_volume(global_avg_pool(audio_feat), f, fh, fw);
      auto cat = concat(vis.out, a_vol, 0);  // [2c, F, H, W]
      return relu(conv3d(cat, m.concat_w, {1, 1, 1}, Pad::valid, m.concat_b));
    }
    case FusionMode::bilinear: {
      auto hv = matmul(reshape(global_avg_pool(vis.out), {1, c}), m.bl_v_w);
      auto ha = matmul(reshape(global_avg_pool(audio_feat), {1, c}), m.bl_a_w);
      auto gate = sigmoid(linear(mul(hv, ha), m.bl_gate_w, m.bl_gate_b));
      return channel_scale(vis.out, reshape(gate, {c}));
    }
  }
  throw std::invalid_argument("fuse: unknown fusion mode");
}

/// Six decoding layers; skip taps are concatenated along the frame axis in
/// reverse stage order, doubling the temporal length back to F0.
template <typename T>
Tensor<T> decoder(const SaliencyModel<T>& m, const Tensor<T>& o_av,
                  const std::array<Tensor<T>, 4>& taps) {
  const auto& cfg = m.cfg;
  const auto target_of = [](const Tensor<T>& t) {
    return std::array<std::int64_t, 3>{t.dim(1), t.dim(2), t.dim(3)};
  };
  auto h = relu(conv3d(o_av, m.dec_w[0], {1, 1, 1}, Pad::same, m.dec_b[0]));
  h = trilinear_upsample(h, target_of(taps[3]));
  for (int i = 1; i <= 3; ++i) {
    h = concat(h, taps[static_cast<std::size_t>(4 - i)], 1);
    h = relu(conv3d(h, m.dec_w[i], {1, 1, 1}, Pad::same, m.dec_b[i]));
    if (i < 3)
      h = trilinear_upsample(h, target_of(taps[static_cast<std::size_t>(3 - i)]));
    else
      h = trilinear_upsample(h, {cfg.frames, cfg.height / 2, cfg.width / 2});
  }
  h = relu(conv3d(h, m.dec_w[4], {1, 1, 1}, Pad::same, m.dec_b[4]));
  h = trilinear_upsample(h, {cfg.frames, cfg.height, cfg.width});
  h = relu(conv3d(h, m.dec_w[5], {1, 1, 1}, Pad::same, m.dec_b[5]));     // [1, F0, H0, W0]
  h = conv3d(h, m.dec_w[6], {1, 1, 1}, Pad::valid, m.dec_b[6]);          // [1, 1, H0, W0]
  return reshape(sigmoid(h), {cfg.height, cfg.width});
}

enum class Which { audio, audio_visual };

/// Domain classifier behind a gradient reversal layer: three 1x1 channel
/// compressions (c -> c/2 -> c/4 -> c/8), global average pooling, then fully
/// connected 64 -> 16 -> 1 with a sigmoid score. The score is the predicted
/// probability that the features come from the source domain.
template <typename T>
Tensor<T> discriminator(const SaliencyModel<T>& m, const Tensor<T>& features, Which which,
                        T lambda) {
  Tensor<T> h = grad_reversal(features, lambda);
  if (which == Which::audio) {
    detail::require(features.rank() == 2, "discriminator: audio features must be [c, T]");
    for (int i = 0; i < 3; ++i) h = relu(conv1d(h, m.da_conv_w[i], 1, Pad::same, m.da_conv_b[i]));
  } else {
    detail::require(features.rank() == 4, "discriminator: fused features must be [c, F, H, W]");
    for (int i = 0; i < 3; ++i)
      h = relu(conv3d(h, m.dav_conv_w[i], {1, 1, 1}, Pad::same, m.dav_conv_b[i]));
  }
  const auto& fw = which == Which::audio ? m.da_fc_w : m.dav_fc_w;
  const auto& fb = which == Which::audio ? m.da_fc_b : m.dav_fc_b;
  h = reshape(global_avg_pool(h), {1, m.cfg.base_channels / 8});
  h = relu(linear(h, fw[0], fb[0]));
  h = relu(linear(h, fw[1], fb[1]));
  h = sigmoid(linear(h, fw[2], fb[2]));
  return reshape(h, {1});
}

template <typename T>
struct ForwardOutput {
  Tensor<T> saliency;        // P [H0, W0], undefined when skipped
  Tensor<T> d_audio;         // scalar in (0,1), undefined unless DA covers audio
  Tensor<T> d_av;            // scalar in (0,1), undefined unless DA covers fusion
  Tensor<T> audio_features;  // O_A [c, 3]
  Tensor<T> fused;           // O_AV [c, F, H, W]
};

template <typename T>
ForwardOutput<T> forward(const SaliencyModel<T>& m, const Tensor<T>& video,
                         const Tensor<T>& audio, DaMode da = DaMode::none,
                         bool want_saliency = true) {
  ForwardOutput<T> out;
  auto vis = visual_encoder(m, video);
  out.audio_features = audio_encoder(m, audio);
  out.fused = fuse(m, vis, out.audio_features);
  if (want_saliency) out.saliency = decoder(m, out.fused, vis.taps);
  const T lambda = static_cast<T>(m.cfg.grl_lambda);
  if (da != DaMode::none) out.d_audio = discriminator(m, out.audio_features, Which::audio, lambda);
  if (da == DaMode::audio_fusion) out.d_av = discriminator(m, out.fused, Which::audio_visual, lambda);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: magic "AVSM", version byte, config block, then
// parameters in declaration order as little-endian f32 with per-tensor shape
// headers.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u8(std::string& s, std::uint8_t v) { s.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& s, float v) { put_u32(s, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  bool at_end() const { return pos_ == buf_.size(); }
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw std::runtime_error(what_ + ": truncated file");
  }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace detail

inline constexpr std::uint8_t kCheckpointVersion = 1;

template <typename T>
void save_model(const std::string& path, const SaliencyModel<T>& m) {
  std::string s;
  s += "AVSM";
  detail::put_u8(s, kCheckpointVersion);
  detail::put_u8(s, static_cast<std::uint8_t>(m.cfg.fusion_mode));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cfg.base_channels));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cfg.frames));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cfg.height));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cfg.width));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cfg.audio_len));
  detail::put_u32(s, static_cast<std::uint32_t>(m.cfg.fusion_dim));
  detail::put_f32(s, static_cast<float>(m.cfg.grl_lambda));
  for (const auto& [name, t] : m.parameters()) {
    detail::put_u8(s, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(s, static_cast<std::uint32_t>(d));
    for (const T v : t.values()) detail::put_f32(s, static_cast<float>(v));
  }
  detail::write_file_atomic(path, s);
}

template <typename T = float>
SaliencyModel<T> load_model(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  detail::ByteReader r(bytes, "checkpoint " + path);
  r.need(4);
  if (bytes.substr(0, 4) != "AVSM") throw std::runtime_error("checkpoint " + path + ": bad magic");
  for (int i = 0; i < 4; ++i) r.u8();
  if (r.u8() != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported version");
  ModelConfig cfg;
  const std::uint8_t fm = r.u8();
  if (fm > 2) throw std::runtime_error("checkpoint " + path + ": bad fusion mode");
  cfg.fusion_mode = static_cast<FusionMode>(fm);
  cfg.base_channels = r.u32();
  cfg.frames = r.u32();
  cfg.height = r.u32();
  cfg.width = r.u32();
  cfg.audio_len = r.u32();
  cfg.fusion_dim = r.u32();
  cfg.grl_lambda = r.f32();
  cfg.validate();
  SaliencyModel<T> m = SaliencyModel<T>::init(cfg, 0);
  for (auto& [name, t] : m.parameters()) {
    const std::uint8_t ndim = r.u8();
    if (ndim != t.rank())
      throw std::runtime_error("checkpoint " + path + ": rank mismatch for " + name);
    for (std::size_t i = 0; i < t.rank(); ++i) {
      if (static_cast<std::int64_t>(r.u32()) != t.shape()[i])
        throw std::runtime_error("checkpoint " + path + ": shape mismatch for " + name);
    }
    for (auto& v : t.values()) v = static_cast<T>(r.f32());
  }
  if (!r.at_end()) throw std::runtime_error("checkpoint " + path + ": trailing bytes");
  return m;
}

}  // namespace avsal
