// Copyright 2026 The magphase Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dual-branch Thin ResNet34 speaker embedder.
//
//   fbank [N,1,192,T] -> branch_f -> F_f [N,C,H_f,W] -+-> co-attention -+-> SAP_f -> e_f -+
//   modgd [N,1,201,T] -> branch_g -> F_g [N,C,H_g,W] -+                 +-> SAP_g -> e_g -+-> fusion head -> e
//
// Both branches stride time identically, so W agrees for equal T. The fusion
// head projects each pooled embedding with its own D x D map, concatenates,
// and projects the 2D vector back to D.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "magphase/features.hpp"
#include "magphase/rng.hpp"
#include "magphase/tensor.hpp"

namespace magphase {

// Visits every tensor of a module. Buffers (BN running statistics) are
// visited with is_buffer = true; they are saved but never optimized.
using TensorVisitor = std::function<void(const std::string& name, Tensor& t, bool is_buffer)>;

namespace detail {

inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape), 0.0, true);
  for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Building blocks

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw, Conv2dGeometry geom, Rng& rng)
      : weight_(detail::kaiming_uniform({out_ch, in_ch, kh, kw}, in_ch * kh * kw, rng)), geom_(geom) {}

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight_, geom_); }
  Tensor& weight() { return weight_; }
  const Conv2dGeometry& geometry() const { return geom_; }

  void visit(const std::string& prefix, const TensorVisitor& v) { v(prefix + ".weight", weight_, false); }

 private:
  Tensor weight_;
  Conv2dGeometry geom_;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t ch)
      : gamma_({ch}, 1.0, true), beta_({ch}, 0.0, true), mean_({ch}, 0.0), var_({ch}, 1.0) {}

  Tensor operator()(const Tensor& x, bool training) {
    return batchnorm2d(x, gamma_, beta_, mean_, var_, training);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + ".gamma", gamma_, false);
    v(prefix + ".beta", beta_, false);
    v(prefix + ".running_mean", mean_, true);
    v(prefix + ".running_var", var_, true);
  }

 private:
  Tensor gamma_, beta_, mean_, var_;
};

// Two 3x3 conv+BN layers with an identity shortcut, or a 1x1 conv+BN
// projection when the stride or channel count changes.
class BasicBlock {
 public:
  BasicBlock(std::size_t in_ch, std::size_t out_ch, std::pair<std::size_t, std::size_t> stride, Rng& rng)
      : conv1_(in_ch, out_ch, 3, 3, {stride.first, stride.second, 1, 1}, rng),
        bn1_(out_ch),
        conv2_(out_ch, out_ch, 3, 3, {1, 1, 1, 1}, rng),
        bn2_(out_ch) {
    if (in_ch != out_ch || stride.first != 1 || stride.second != 1) {
      proj_.emplace(in_ch, out_ch, 1, 1, Conv2dGeometry{stride.first, stride.second, 0, 0}, rng);
      proj_bn_.emplace(out_ch);
    }
  }

  Tensor forward(const Tensor& x, bool training) {
    Tensor y = relu(bn1_(conv1_(x), training));
    y = bn2_(conv2_(y), training);
    Tensor shortcut = proj_ ? (*proj_bn_)((*proj_)(x), training) : x;
    return relu(add(y, shortcut));
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    conv1_.visit(prefix + ".conv1", v);
    bn1_.visit(prefix + ".bn1", v);
    conv2_.visit(prefix + ".conv2", v);
    bn2_.visit(prefix + ".bn2", v);
    if (proj_) {
      proj_->visit(prefix + ".proj", v);
      proj_bn_->visit(prefix + ".proj_bn", v);
    }
  }

 private:
  Conv2d conv1_;
  BatchNorm bn1_;
  Conv2d conv2_;
  BatchNorm bn2_;
  std::optional<Conv2d> proj_;
  std::optional<BatchNorm> proj_bn_;
};

enum class BranchKind { kFbank, kModgd };

struct BranchConfig {
  // channels[0] is the stem width, channels[1..4] the stage widths.
  std::vector<std::size_t> channels{16, 16, 32, 64, 128};
  std::vector<std::size_t> blocks{3, 4, 6, 3};
  std::vector<std::pair<std::size_t, std::size_t>> stage_strides{{1, 1}, {2, 2}, {2, 2}, {1, 1}};

  static BranchConfig full() { return {}; }
  static BranchConfig tiny() { return {{4, 4, 8, 16, 32}, {1, 1, 1, 1}, {{1, 1}, {2, 2}, {2, 2}, {1, 1}}}; }

  std::size_t out_channels() const { return channels.back(); }

  void validate() const {
    if (blocks.empty() || channels.size() != blocks.size() + 1 || stage_strides.size() != blocks.size()) {
      throw std::invalid_argument("BranchConfig: need channels = stages + 1 and one stride per stage");
    }
    for (std::size_t c : channels)
      if (c == 0) throw std::invalid_argument("BranchConfig: channel counts must be positive");
    for (std::size_t b : blocks)
      if (b == 0) throw std::invalid_argument("BranchConfig: every stage needs at least one block");
    for (auto [h, w] : stage_strides)
      if (h == 0 || w == 0) throw std::invalid_argument("BranchConfig: strides must be positive");
  }
};

// One Thin ResNet34 branch: 7x7 stride (2,1) stem, an extra 7x1 stride (3,1)
// stem for MODGD, then residual stages. Input [N,1,F,T].
class Branch {
 public:
  Branch(const BranchConfig& cfg, BranchKind kind, Rng& rng) : kind_(kind) {
    cfg.validate();
    stem_ = Conv2d(1, cfg.channels[0], 7, 7, {2, 1, 3, 3}, rng);
    stem_bn_ = BatchNorm(cfg.channels[0]);
    if (kind == BranchKind::kModgd) {
      extra_.emplace(cfg.channels[0], cfg.channels[0], 7, 1, Conv2dGeometry{3, 1, 3, 0}, rng);
      extra_bn_.emplace(cfg.channels[0]);
    }
    std::size_t in = cfg.channels[0];
    for (std::size_t s = 0; s < cfg.blocks.size(); ++s) {
      std::vector<BasicBlock> stage;
      for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
        stage.emplace_back(in, cfg.channels[s + 1], b == 0 ? cfg.stage_strides[s] : std::pair<std::size_t, std::size_t>{1, 1},
                           rng);
        in = cfg.channels[s + 1];
      }
      stages_.push_back(std::move(stage));
    }
  }

  BranchKind kind() const { return kind_; }
  std::size_t input_dim() const { return kind_ == BranchKind::kFbank ? kFbankDim : kModgdDim; }

  // Returns [N,C,H,W]; `trace` (optional) receives the shape after every stem
  // and stage.
  Tensor forward(const Tensor& x, bool training, std::vector<Shape>* trace = nullptr) {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != input_dim()) {
      throw ShapeError(std::string(kind_ == BranchKind::kFbank ? "fbank" : "modgd") +
                       " branch expects [N,1," + std::to_string(input_dim()) + ",T], got " + shape_str(x.shape()));
    }
    Tensor y = relu(stem_bn_(stem_(x), training));
    if (trace) trace->push_back(y.shape());
    if (extra_) {
      y = relu((*extra_bn_)((*extra_)(y), training));
      if (trace) trace->push_back(y.shape());
    }
    for (auto& stage : stages_) {
      for (auto& block : stage) y = block.forward(y, training);
      if (trace) trace->push_back(y.shape());
    }
    return y;
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    stem_.visit(prefix + ".stem", v);
    stem_bn_.visit(prefix + ".stem_bn", v);
    if (extra_) {
      extra_->visit(prefix + ".stem2", v);
      extra_bn_->visit(prefix + ".stem2_bn", v);
    }
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].visit(prefix + ".stage" + std::to_string(s + 1) + "." + std::to_string(b), v);
  }

 private:
  BranchKind kind_;
  Conv2d stem_;
  BatchNorm stem_bn_;
  std::optional<Conv2d> extra_;
  std::optional<BatchNorm> extra_bn_;
  std::vector<std::vector<BasicBlock>> stages_;
};

// ---------------------------------------------------------------------------
// Self-attentive pooling: average over frequency, then attention over time,
// alpha_t = softmax_t(v . tanh(W h_t + b)), output sum_t alpha_t h_t.

class SelfAttentivePooling {
 public:
  SelfAttentivePooling() = default;
  SelfAttentivePooling(std::size_t ch, Rng& rng)
      : weight_(detail::kaiming_uniform({ch, ch}, ch, rng)),
        bias_({ch}, 0.0, true),
        context_(detail::kaiming_uniform({ch, 1}, ch, rng)) {}

  // F: [N,C,H,W] -> [N,C], or [C,H,W] -> [C].
  Tensor forward(const Tensor& f) const {
    const bool single = f.rank() == 3;
    const Tensor x = single ? reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)}) : f;
    if (x.rank() != 4 || x.dim(1) != weight_.dim(0)) throw ShapeError("sap", x.shape(), weight_.shape());
    const std::size_t n = x.dim(0), c = x.dim(1), w = x.dim(3);
    Tensor h = transpose(mean_axis(x, 2));  // [N,W,C]
    Tensor u = tanh(add_bias(matmul(h, weight_), bias_));
    Tensor alpha = softmax_axis(reshape(matmul(u, context_), {n, w}), 1);
    Tensor pooled = reshape(matmul(reshape(alpha, {n, 1, w}), h), {n, c});
    return single ? reshape(pooled, {c}) : pooled;
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  Tensor& context() { return context_; }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + ".weight", weight_, false);
    v(prefix + ".bias", bias_, false);
    v(prefix + ".context", context_, false);
  }

 private:
  Tensor weight_, bias_, context_;
};

// ---------------------------------------------------------------------------
// Channel co-attention between the MODGD (g) and FBank (f) feature maps.
//
//   Q_g = W_1 F_g, K_f = W_2 pool_H(F_f)  (flattened to C x H_g W)
//   A = Q_g K_f^T / sqrt(H_g W)            (C x C)
//   S_c = rowsoftmax(A^T), S_r = rowsoftmax(A)
//   F_f' = S_c V_f, F_g' = S_r V_g        (V: 1x1 convs of the original maps)
//
// The outputs are F + F' when `residual` is set, F' otherwise. K_f uses F_f
// adaptively pooled along frequency to H_g, because the two branches end at
// different frequency heights; V_f keeps F_f's own grid.

struct CoAttentionOutput {
  Tensor g;    // adjusted MODGD map, shape of F_g
  Tensor f;    // adjusted FBank map, shape of F_f
  Tensor s_c;  // [N,C,C]
  Tensor s_r;  // [N,C,C]
};

class CoAttention {
 public:
  CoAttention() = default;
  CoAttention(std::size_t ch, Rng& rng)
      : w_q_(detail::kaiming_uniform({ch, ch, 1, 1}, ch, rng)),
        w_k_(detail::kaiming_uniform({ch, ch, 1, 1}, ch, rng)),
        w_vf_(detail::kaiming_uniform({ch, ch, 1, 1}, ch, rng)),
        w_vg_(detail::kaiming_uniform({ch, ch, 1, 1}, ch, rng)) {}

  bool residual = true;
  bool scaled = true;  // divide A by sqrt(H_g W)

  CoAttentionOutput forward(const Tensor& fg_in, const Tensor& ff_in) const {
    const bool single = fg_in.rank() == 3;
    auto batch = [&](const Tensor& t) {
      return t.rank() == 3 ? reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}) : t;
    };
    const Tensor fg = batch(fg_in), ff = batch(ff_in);
    if (fg.rank() != 4 || ff.rank() != 4 || fg.dim(0) != ff.dim(0) || fg.dim(1) != ff.dim(1) ||
        fg.dim(3) != ff.dim(3) || fg.dim(1) != w_q_.dim(0)) {
      throw ShapeError("co_attention", fg_in.shape(), ff_in.shape());
    }
    const std::size_t n = fg.dim(0), c = fg.dim(1), hg = fg.dim(2), hf = ff.dim(2), w = fg.dim(3);
    const Tensor ff_aligned = hf == hg ? ff : adaptive_avg_pool(ff, 2, hg);
    Tensor q = reshape(conv2d(fg, w_q_), {n, c, hg * w});
    Tensor k = reshape(conv2d(ff_aligned, w_k_), {n, c, hg * w});
    Tensor a = matmul(q, transpose(k));
    if (scaled) a = scale(a, 1.0 / std::sqrt(static_cast<double>(hg * w)));
    CoAttentionOutput out;
    out.s_c = softmax_axis(transpose(a), 2);
    out.s_r = softmax_axis(a, 2);
    Tensor vf = reshape(conv2d(ff, w_vf_), {n, c, hf * w});
    Tensor vg = reshape(conv2d(fg, w_vg_), {n, c, hg * w});
    Tensor f2 = reshape(matmul(out.s_c, vf), ff.shape());
    Tensor g2 = reshape(matmul(out.s_r, vg), fg.shape());
    out.f = residual ? add(ff, f2) : f2;
    out.g = residual ? add(fg, g2) : g2;
    if (single) {
      out.f = reshape(out.f, ff_in.shape());
      out.g = reshape(out.g, fg_in.shape());
    }
    return out;
  }

  Tensor& w_q() { return w_q_; }
  Tensor& w_k() { return w_k_; }
  Tensor& w_vf() { return w_vf_; }
  Tensor& w_vg() { return w_vg_; }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + ".w_q", w_q_, false);
    v(prefix + ".w_k", w_k_, false);
    v(prefix + ".w_vf", w_vf_, false);
    v(prefix + ".w_vg", w_vg_, false);
  }

 private:
  Tensor w_q_, w_k_, w_vf_, w_vg_;
};

// Largest |row sum - 1| or negative entry magnitude over a batch of
// row-stochastic matrices.
inline double row_stochastic_error(const Tensor& s) {
  const std::size_t cols = s.dim(s.rank() - 1);
  auto d = s.data();
  double worst = 0.0;
  for (std::size_t r = 0; r < s.numel() / cols; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = d[r * cols + j];
      worst = std::max(worst, -v);
      acc += v;
    }
    worst = std::max(worst, std::abs(acc - 1.0));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Embedding fusion: e = W_psi^T [W_phi1^T e_f, W_phi2^T e_g].

class FusionHead {
 public:
  FusionHead() = default;
  FusionHead(std::size_t dim, Rng& rng)
      : phi_f_(detail::kaiming_uniform({dim, dim}, dim, rng)),
        phi_g_(detail::kaiming_uniform({dim, dim}, dim, rng)),
        psi_(detail::kaiming_uniform({2 * dim, dim}, 2 * dim, rng)) {}

  // [N,D] x [N,D] -> [N,D], or [D] x [D] -> [D].
  Tensor forward(const Tensor& e_f, const Tensor& e_g) const {
    if (e_f.shape() != e_g.shape()) throw ShapeError("fuse_embeddings", e_f.shape(), e_g.shape());
    const bool single = e_f.rank() == 1;
    const Tensor a = single ? reshape(e_f, {1, e_f.dim(0)}) : e_f;
    const Tensor b = single ? reshape(e_g, {1, e_g.dim(0)}) : e_g;
    Tensor e = matmul(concat(matmul(a, phi_f_), matmul(b, phi_g_), 1), psi_);
    return single ? reshape(e, {e.dim(1)}) : e;
  }

  Tensor& phi_f() { return phi_f_; }
  Tensor& phi_g() { return phi_g_; }
  Tensor& psi() { return psi_; }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + ".phi_f", phi_f_, false);
    v(prefix + ".phi_g", phi_g_, false);
    v(prefix + ".psi", psi_, false);
  }

 private:
  Tensor phi_f_, phi_g_, psi_;
};

// ---------------------------------------------------------------------------
// Classification heads and losses

enum class LossKind { kSoftmax, kAam };

class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t dim, std::size_t classes, LossKind mode, Rng& rng, double scale = 30.0,
                 double margin = 0.2)
      : weight_(detail::kaiming_uniform({dim, classes}, dim, rng)),
        bias_({classes}, 0.0, mode == LossKind::kSoftmax),
        mode_(mode),
        scale_(scale),
        margin_(margin) {}

  LossKind mode() const { return mode_; }
  double scale_factor() const { return scale_; }
  double margin() const { return margin_; }
  void set_margin(double m) { margin_ = m; }
  void set_scale(double s) { scale_ = s; }
  std::size_t num_classes() const { return weight_.dim(1); }

  // Cosines between length-normalized embeddings and class columns: [N,C].
  Tensor cosines(const Tensor& emb) const { return matmul(l2_normalize(emb, 1), l2_normalize(weight_, 0)); }

  // Margin-free scores used for prediction.
  Tensor logits(const Tensor& emb) const {
    if (mode_ == LossKind::kSoftmax) return add_bias(matmul(emb, weight_), bias_);
    return scale(cosines(emb), scale_);
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + ".weight", weight_, false);
    if (mode_ == LossKind::kSoftmax) v(prefix + ".bias", bias_, false);
  }

 private:
  Tensor weight_, bias_;
  LossKind mode_ = LossKind::kSoftmax;
  double scale_ = 30.0;
  double margin_ = 0.2;
};

inline void check_labels(std::span<const std::size_t> labels, std::size_t classes) {
  for (std::size_t y : labels)
    if (y >= classes)
      throw std::out_of_range("label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                              " classes");
}

// Mean over the batch of -log softmax(W^T x + b)[y].
inline Tensor cross_entropy_loss(const Tensor& emb, std::span<const std::size_t> labels, const ClassifierHead& head) {
  check_labels(labels, head.num_classes());
  Tensor& w = const_cast<ClassifierHead&>(head).weight();
  Tensor& b = const_cast<ClassifierHead&>(head).bias();
  return cross_entropy(add_bias(matmul(emb, w), b), labels);
}

// Additive angular margin softmax: the true-class logit is s cos(theta_y + m),
// the others s cos(theta_j).
inline Tensor aam_softmax_loss(const Tensor& emb, std::span<const std::size_t> labels, const ClassifierHead& head) {
  check_labels(labels, head.num_classes());
  const double m = head.margin(), s = head.scale_factor();
  if (!(s > 0.0) || !(m >= 0.0 && m < std::numbers::pi / 2)) {
    throw std::invalid_argument("aam_softmax_loss: need s > 0 and 0 <= m < pi/2");
  }
  Tensor cosv = head.cosines(emb);
  const std::size_t n = cosv.dim(0), c = cosv.dim(1);
  Tensor onehot({n, c}, 0.0);
  for (std::size_t i = 0; i < n; ++i) onehot.mutable_data()[i * c + labels[i]] = 1.0;
  Tensor with_margin = cos(add_scalar(arccos_clamped(cosv), m));
  Tensor logits = scale(add(cosv, mul(onehot, sub(with_margin, cosv))), s);
  return cross_entropy(logits, labels);
}

inline Tensor classification_loss(const Tensor& emb, std::span<const std::size_t> labels, const ClassifierHead& head) {
  return head.mode() == LossKind::kAam ? aam_softmax_loss(emb, labels, head) : cross_entropy_loss(emb, labels, head);
}

// ---------------------------------------------------------------------------
// Full model

enum class FusionMode { kFbankOnly, kModgdOnly, kConcat, kCoAttention };

struct ModelConfig {
  BranchConfig branch = BranchConfig::full();
  FusionMode fusion = FusionMode::kCoAttention;
  LossKind loss = LossKind::kAam;
  std::size_t num_classes = 2;
  double scale = 30.0;
  double margin = 0.2;
  std::uint64_t seed = 1;
};

inline bool uses_fbank(FusionMode m) { return m != FusionMode::kModgdOnly; }
inline bool uses_modgd(FusionMode m) { return m != FusionMode::kFbankOnly; }

struct ModelOutput {
  Tensor embedding;  // [N,D]
  Tensor s_c, s_r;   // co-attention matrices, undefined when bypassed
};

class SpeakerModel {
 public:
  explicit SpeakerModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.branch.validate();
    Rng rng(cfg.seed);
    const std::size_t d = cfg.branch.out_channels();
    if (uses_fbank(cfg.fusion)) {
      fbank_.emplace(cfg.branch, BranchKind::kFbank, rng);
      sap_f_.emplace(d, rng);
    }
    if (uses_modgd(cfg.fusion)) {
      modgd_.emplace(cfg.branch, BranchKind::kModgd, rng);
      sap_g_.emplace(d, rng);
    }
    if (cfg.fusion == FusionMode::kCoAttention) coattn_.emplace(d, rng);
    if (cfg.fusion == FusionMode::kCoAttention || cfg.fusion == FusionMode::kConcat) head_.emplace(d, rng);
    classifier_ = ClassifierHead(d, cfg.num_classes, cfg.loss, rng, cfg.scale, cfg.margin);
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t embedding_dim() const { return cfg_.branch.out_channels(); }

  // fbank: [N,1,192,T], modgd: [N,1,201,T]; an input the mode does not use
  // may be left undefined. `ablation` evaluates a single branch of a fused
  // model (co-attention and fusion head bypassed).
  ModelOutput forward(const Tensor& fbank, const Tensor& modgd, bool training,
                      std::optional<FusionMode> ablation = std::nullopt) {
    const FusionMode mode = ablation.value_or(cfg_.fusion);
    if ((uses_fbank(mode) && !fbank_) || (uses_modgd(mode) && !modgd_) ||
        (mode == FusionMode::kCoAttention && !coattn_) ||
        ((mode == FusionMode::kCoAttention || mode == FusionMode::kConcat) && !head_)) {
      throw std::invalid_argument("SpeakerModel: requested mode needs components this model lacks");
    }
    ModelOutput out;
    if (mode == FusionMode::kFbankOnly) {
      out.embedding = sap_f_->forward(fbank_->forward(fbank, training));
      return out;
    }
    if (mode == FusionMode::kModgdOnly) {
      out.embedding = sap_g_->forward(modgd_->forward(modgd, training));
      return out;
    }
    Tensor ff = fbank_->forward(fbank, training);
    Tensor fg = modgd_->forward(modgd, training);
    if (mode == FusionMode::kCoAttention) {
      auto co = coattn_->forward(fg, ff);
      ff = co.f;
      fg = co.g;
      out.s_c = co.s_c;
      out.s_r = co.s_r;
    }
    out.embedding = head_->forward(sap_f_->forward(ff), sap_g_->forward(fg));
    return out;
  }

  ClassifierHead& classifier() { return classifier_; }
  const ClassifierHead& classifier() const { return classifier_; }
  Branch* fbank_branch() { return fbank_ ? &*fbank_ : nullptr; }
  Branch* modgd_branch() { return modgd_ ? &*modgd_ : nullptr; }
  CoAttention* co_attention() { return coattn_ ? &*coattn_ : nullptr; }
  FusionHead* fusion_head() { return head_ ? &*head_ : nullptr; }

  void visit(const TensorVisitor& v, bool include_classifier = true) {
    if (fbank_) fbank_->visit("fbank", v);
    if (modgd_) modgd_->visit("modgd", v);
    if (coattn_) coattn_->visit("coattn", v);
    if (sap_f_) sap_f_->visit("sap_f", v);
    if (sap_g_) sap_g_->visit("sap_g", v);
    if (head_) head_->visit("fusion", v);
    if (include_classifier) classifier_.visit("classifier", v);
  }

  std::vector<Tensor> parameters(bool include_classifier = true) {
    std::vector<Tensor> out;
    visit([&](const std::string&, Tensor& t, bool buffer) { if (!buffer) out.push_back(t); }, include_classifier);
    return out;
  }

  std::size_t num_parameters(bool include_classifier = false) {
    std::size_t n = 0;
    for (const auto& t : parameters(include_classifier)) n += t.numel();
    return n;
  }

  std::vector<NamedTensor> state() {
    std::vector<NamedTensor> out;
    visit([&](const std::string& name, Tensor& t, bool) { out.push_back({name, t}); });
    return out;
  }

  // Copies values by name; every tensor of this model must be present.
  void load_state(const std::vector<NamedTensor>& saved) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& nt : saved) by_name[nt.name] = &nt.tensor;
    visit([&](const std::string& name, Tensor& t, bool) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + name);
      if (it->second->shape() != t.shape()) throw ShapeError("load " + name, it->second->shape(), t.shape());
      std::copy(it->second->data().begin(), it->second->data().end(), t.mutable_data().begin());
    });
  }

 private:
  ModelConfig cfg_;
  std::optional<Branch> fbank_, modgd_;
  std::optional<SelfAttentivePooling> sap_f_, sap_g_;
  std::optional<CoAttention> coattn_;
  std::optional<FusionHead> head_;
  ClassifierHead classifier_;
};

// Feature matrix (T x F) as a [1,1,F,T] network input.
inline Tensor to_input(const FeatureMatrix& m) {
  std::vector<double> v(m.rows * m.cols);
  for (std::size_t t = 0; t < m.rows; ++t)
    for (std::size_t f = 0; f < m.cols; ++f) v[f * m.rows + t] = m.at(t, f);
  return Tensor({1, 1, m.cols, m.rows}, std::move(v));
}

// Stacks equal-size feature matrices into [N,1,F,T].
inline Tensor stack_inputs(std::span<const FeatureMatrix* const> ms) {
  if (ms.empty()) throw std::invalid_argument("stack_inputs: empty batch");
  const std::size_t rows = ms[0]->rows, cols = ms[0]->cols;
  std::vector<double> v;
  v.reserve(ms.size() * rows * cols);
  for (const auto* m : ms) {
    if (m->rows != rows || m->cols != cols) throw std::invalid_argument("stack_inputs: ragged batch");
    for (std::size_t f = 0; f < cols; ++f)
      for (std::size_t t = 0; t < rows; ++t) v.push_back(m->at(t, f));
  }
  return Tensor({ms.size(), 1, cols, rows}, std::move(v));
}

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step() = 0;
  virtual void set_lr(double lr) = 0;
  virtual double lr() const = 0;

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 protected:
  explicit Optimizer(std::vector<Tensor> params) : params_(std::move(params)) {}
  std::vector<Tensor> params_;
};

// Gradient descent with optional heavy-ball momentum.
class Sgd : public Optimizer {
 public:
  Sgd(std::vector<Tensor> params, double lr = 1e-4, double momentum = 0.0)
      : Optimizer(std::move(params)), lr_(lr), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  void step() override {
    if (lr_ == 0.0) return;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& vel = velocity_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        vel[k] = momentum_ * vel[k] + g[k];
        w[k] -= lr_ * vel[k];
      }
    }
  }
  void set_lr(double lr) override { lr_ = lr; }
  double lr() const override { return lr_; }

 private:
  double lr_, momentum_;
  std::vector<std::vector<double>> velocity_;
};

class Adam : public Optimizer {
 public:
  Adam(std::vector<Tensor> params, double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : Optimizer(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() override {
    ++t_;
    if (lr_ == 0.0) return;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g[k];
        v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g[k] * g[k];
        w[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }
  void set_lr(double lr) override { lr_ = lr; }
  double lr() const override { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training and inference

struct Batch {
  Tensor fbank;  // [N,1,192,T]
  Tensor modgd;  // [N,1,201,T]
  std::vector<std::size_t> labels;
};

struct StepStats {
  double loss = 0.0;             // before the update
  std::size_t correct = 0;       // argmax hits in the batch
  double attention_error = 0.0;  // row_stochastic_error over S_c and S_r
};

inline StepStats train_step(SpeakerModel& model, const Batch& batch, Optimizer& opt) {
  opt.zero_grad();
  const auto out = model.forward(batch.fbank, batch.modgd, true);
  Tensor loss = classification_loss(out.embedding, batch.labels, model.classifier());
  StepStats stats;
  stats.loss = loss.item();
  {
    const Tensor logits = model.classifier().logits(out.embedding.detach());
    const std::size_t c = logits.dim(1);
    auto d = logits.data();
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      const auto row = d.subspan(i * c, c);
      stats.correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
                       batch.labels[i];
    }
  }
  if (out.s_c.defined()) {
    stats.attention_error = std::max(row_stochastic_error(out.s_c), row_stochastic_error(out.s_r));
  }
  loss.backward();
  opt.step();
  return stats;
}

// Eval-mode embedding of one full utterance.
inline std::vector<double> extract_embedding(SpeakerModel& model, const FeatureMatrix* fbank,
                                             const FeatureMatrix* modgd,
                                             std::optional<FusionMode> ablation = std::nullopt) {
  const Tensor f = fbank ? to_input(*fbank) : Tensor();
  const Tensor g = modgd ? to_input(*modgd) : Tensor();
  const auto out = model.forward(f, g, false, ablation);
  return {out.embedding.data().begin(), out.embedding.data().end()};
}

}  // namespace magphase
