// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fopro/core.hpp"
#include "fopro/nn.hpp"

#include <array>
#include <atomic>
#include <string>
#include <vector>

namespace fopro {

struct ModelConfig {
  int input_dim = 32;
  int num_classes = 10;
  int hidden_dim = 64;
  int feature_dim = 64;       // d_e
  int projection_dim = 128;   // d_p
  int bank_size = 8192;       // Q
  double encoder_momentum = 0.999;  // m_e

  void validate() const {
    require(input_dim > 0 && num_classes >= 2 && hidden_dim > 0 && feature_dim > 0 && projection_dim > 0,
            "model: dimensions must be positive and num_classes >= 2");
    require(bank_size > 0, "model: bank_size must be positive");
    require(encoder_momentum >= 0.0 && encoder_momentum < 1.0, "model: encoder_momentum must lie in [0,1)");
  }
};

enum class Group { encoder, classifier, projector, reconstructor, aux_classifier, relation };

inline constexpr std::array<Group, 6> kAllGroups = {Group::encoder,       Group::classifier,     Group::projector,
                                                    Group::reconstructor, Group::aux_classifier, Group::relation};

inline const char* to_string(Group g) {
  switch (g) {
    case Group::encoder: return "encoder";
    case Group::classifier: return "classifier";
    case Group::projector: return "projector";
    case Group::reconstructor: return "reconstructor";
    case Group::aux_classifier: return "aux_classifier";
    case Group::relation: return "relation";
  }
  return "?";
}

struct PlainForward {
  Matrix v;           // encoder features
  Matrix logits;      // classifier logits
  Matrix p;           // classifier probabilities
  Matrix u;           // projector output before normalization
  Matrix z;           // unit-norm embeddings
  Matrix v_rec;       // reconstructed features
  Matrix aux_logits;  // auxiliary classifier logits
  Matrix q;           // auxiliary classifier probabilities
  nn::Mlp::Tape encoder_tape, classifier_tape, projector_tape, reconstructor_tape, aux_tape;
};

// Gradients of the total loss w.r.t. the plain-path outputs. Empty matrices
// mean "no contribution".
struct HeadGrads {
  Matrix v;
  Matrix logits;
  Matrix z;
  Matrix v_rec;
  Matrix aux_logits;
};

struct RelationForward {
  Matrix scores;  // n x C
  nn::Mlp::Tape tape;
  Eigen::Index classes = 0;
  Eigen::Index dim = 0;
};

// Siamese encoder pair, heads and relation module. The momentum branch copies
// the encoder and the projector and follows them by exponential averaging; it
// never receives gradients.
class Network {
 public:
  Network() = default;

  Network(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    using nn::Activation;
    const int de = cfg.feature_dim, dp = cfg.projection_dim, C = cfg.num_classes;
    encoder_ = nn::Mlp({cfg.input_dim, cfg.hidden_dim, cfg.hidden_dim, de}, Activation::tanh, Activation::tanh, rng);
    classifier_ = nn::Mlp({de, C}, Activation::identity, Activation::identity, rng);
    projector_ = nn::Mlp({de, de, dp}, Activation::relu, Activation::identity, rng);
    reconstructor_ = nn::Mlp({dp, de, de}, Activation::relu, Activation::identity, rng);
    aux_classifier_ = nn::Mlp({dp, C}, Activation::identity, Activation::identity, rng);
    relation_ = nn::Mlp({2 * dp, dp, 1}, Activation::relu, Activation::identity, rng);
    momentum_encoder_ = encoder_;
    momentum_projector_ = projector_;
  }

  Network(const Network& o) { *this = o; }
  Network& operator=(const Network& o) {
    cfg_ = o.cfg_;
    encoder_ = o.encoder_;
    classifier_ = o.classifier_;
    projector_ = o.projector_;
    reconstructor_ = o.reconstructor_;
    aux_classifier_ = o.aux_classifier_;
    relation_ = o.relation_;
    momentum_encoder_ = o.momentum_encoder_;
    momentum_projector_ = o.momentum_projector_;
    relation_calls_.store(o.relation_calls_.load());
    return *this;
  }

  const ModelConfig& config() const { return cfg_; }

  PlainForward forward_plain(const Matrix& x) const {
    check_input(x);
    PlainForward f;
    f.v = encoder_.forward(x, &f.encoder_tape);
    f.logits = classifier_.forward(f.v, &f.classifier_tape);
    f.p = nn::softmax_rows(f.logits);
    f.u = projector_.forward(f.v, &f.projector_tape);
    f.z = nn::l2_normalize_rows(f.u);
    f.v_rec = reconstructor_.forward(f.z, &f.reconstructor_tape);
    f.aux_logits = aux_classifier_.forward(f.z, &f.aux_tape);
    f.q = nn::softmax_rows(f.aux_logits);
    return f;
  }

  // Classifier probabilities only (evaluation path).
  Matrix predict(const Matrix& x) const {
    check_input(x);
    return nn::softmax_rows(classifier_.forward(encoder_.forward(x)));
  }

  Matrix embed(const Matrix& x) const {
    check_input(x);
    return nn::l2_normalize_rows(projector_.forward(encoder_.forward(x)));
  }

  Matrix forward_momentum(const Matrix& x) const {
    check_input(x);
    return nn::l2_normalize_rows(momentum_projector_.forward(momentum_encoder_.forward(x)));
  }

  void backward_plain(const PlainForward& f, const HeadGrads& g) {
    Matrix dv = g.v.size() ? g.v : Matrix::Zero(f.v.rows(), f.v.cols());
    if (g.logits.size()) dv += classifier_.backward(f.classifier_tape, g.logits);
    Matrix dz = g.z.size() ? g.z : Matrix::Zero(f.z.rows(), f.z.cols());
    if (g.v_rec.size()) dz += reconstructor_.backward(f.reconstructor_tape, g.v_rec);
    if (g.aux_logits.size()) dz += aux_classifier_.backward(f.aux_tape, g.aux_logits);
    if (!dz.isZero(0.0)) dv += projector_.backward(f.projector_tape, nn::l2_normalize_backward(f.u, f.z, dz));
    encoder_.backward(f.encoder_tape, dv);
  }

  // theta2 <- m * theta2 + (1 - m) * theta1, elementwise.
  void ema_step() {
    const double m = cfg_.encoder_momentum;
    auto step = [m](nn::Mlp& slow, const nn::Mlp& fast) {
      for (std::size_t i = 0; i < slow.layers().size(); ++i) {
        auto& s = slow.layers()[i];
        const auto& q = fast.layers()[i];
        s.weight = m * s.weight + (1.0 - m) * q.weight;
        s.bias = m * s.bias + (1.0 - m) * q.bias;
      }
    };
    step(momentum_encoder_, encoder_);
    step(momentum_projector_, projector_);
  }

  // Scores r_ik for every (instance, prototype) pair from [z_i, c_k].
  RelationForward relation_forward(const Matrix& z, const Matrix& centers) const {
    const Eigen::Index dp = cfg_.projection_dim;
    if (z.cols() != dp || centers.cols() != dp) throw DimensionError("relation: embedding width mismatch");
    if (centers.rows() != cfg_.num_classes) throw Error("relation: prototypes missing for some classes");
    relation_calls_.fetch_add(1, std::memory_order_relaxed);
    const Eigen::Index n = z.rows(), C = centers.rows();
    Matrix pairs(n * C, 2 * dp);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < C; ++k) {
        pairs.block(i * C + k, 0, 1, dp) = z.row(i);
        pairs.block(i * C + k, dp, 1, dp) = centers.row(k);
      }
    RelationForward rf;
    rf.classes = C;
    rf.dim = dp;
    Matrix flat = relation_.forward(pairs, &rf.tape);
    rf.scores = Eigen::Map<Matrix>(flat.data(), n, C);
    return rf;
  }

  Matrix relation_scores(const Matrix& z, const Matrix& centers) const { return relation_forward(z, centers).scores; }

  // Accumulates relation gradients; returns dL/dz (prototypes are constants).
  Matrix backward_relation(const RelationForward& rf, const Matrix& grad_scores) {
    const Eigen::Index n = rf.scores.rows(), C = rf.classes, dp = rf.dim;
    Matrix flat = Eigen::Map<const Matrix>(grad_scores.data(), n * C, 1);
    Matrix dpairs = relation_.backward(rf.tape, flat);
    Matrix dz = Matrix::Zero(n, dp);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < C; ++k) dz.row(i) += dpairs.block(i * C + k, 0, 1, dp);
    return dz;
  }

  void zero_grad() {
    for (Group g : kAllGroups) group(g).zero_grad();
  }

  nn::Mlp& group(Group g) {
    switch (g) {
      case Group::encoder: return encoder_;
      case Group::classifier: return classifier_;
      case Group::projector: return projector_;
      case Group::reconstructor: return reconstructor_;
      case Group::aux_classifier: return aux_classifier_;
      case Group::relation: return relation_;
    }
    return encoder_;
  }
  const nn::Mlp& group(Group g) const { return const_cast<Network*>(this)->group(g); }

  nn::Mlp& momentum_encoder() { return momentum_encoder_; }
  nn::Mlp& momentum_projector() { return momentum_projector_; }
  const nn::Mlp& momentum_encoder() const { return momentum_encoder_; }
  const nn::Mlp& momentum_projector() const { return momentum_projector_; }

  // f(name, value, grad) over trainable parameters of one group.
  template <typename F>
  void visit(Group g, F&& f) {
    group(g).visit(to_string(g), f);
  }

  template <typename F>
  void visit_all(F&& f) {
    for (Group g : kAllGroups) visit(g, f);
    momentum_encoder_.visit("momentum_encoder", f);
    momentum_projector_.visit("momentum_projector", f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (Group g : kAllGroups) n += group(g).parameter_count();
    return n;
  }

  // Number of relation-module forward passes; the ablation probe reads this.
  std::uint64_t relation_calls() const { return relation_calls_.load(); }
  void set_relation_calls(std::uint64_t n) { relation_calls_.store(n); }

 private:
  void check_input(const Matrix& x) const {
    if (x.cols() != cfg_.input_dim)
      throw DimensionError("network expects input width " + std::to_string(cfg_.input_dim) + ", got " + std::to_string(x.cols()));
  }

  ModelConfig cfg_;
  nn::Mlp encoder_, classifier_, projector_, reconstructor_, aux_classifier_, relation_;
  nn::Mlp momentum_encoder_, momentum_projector_;
  mutable std::atomic<std::uint64_t> relation_calls_{0};
};

struct BankView {
  Matrix embeddings;  // oldest first
  std::vector<int> labels;
};

// Fixed-capacity FIFO of momentum embeddings.
class EmbeddingBank {
 public:
  static constexpr int kUnlabeled = -2;

  EmbeddingBank() = default;
  EmbeddingBank(int capacity, int dim) : storage_(Matrix::Zero(capacity, dim)), labels_(static_cast<std::size_t>(capacity), kUnlabeled) {
    require(capacity > 0, "bank capacity must be positive");
  }

  int capacity() const { return static_cast<int>(storage_.rows()); }
  int size() const { return size_; }
  bool empty() const { return size_ == 0; }

  void push(const Matrix& z, std::span<const int> labels) {
    require(static_cast<std::size_t>(z.rows()) == labels.size(), "bank_push: label count mismatch");
    if (z.cols() != storage_.cols()) throw DimensionError("bank_push: embedding width mismatch");
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      require(std::abs(z.row(r).norm() - 1.0) <= 1e-6, "bank_push: embeddings must be unit norm");
      storage_.row(head_) = z.row(r);
      labels_[static_cast<std::size_t>(head_)] = labels[static_cast<std::size_t>(r)];
      head_ = (head_ + 1) % capacity();
      size_ = std::min(size_ + 1, capacity());
    }
  }

  BankView view() const {
    BankView v;
    v.embeddings.resize(size_, storage_.cols());
    const int start = size_ < capacity() ? 0 : head_;
    for (int i = 0; i < size_; ++i) {
      const int src = (start + i) % capacity();
      v.embeddings.row(i) = storage_.row(src);
      v.labels.push_back(labels_[static_cast<std::size_t>(src)]);
    }
    return v;
  }

  // Live rows in storage order; the contrastive loss treats them as a set.
  auto active() const { return storage_.topRows(size_); }

  // Raw state for checkpoints.
  const Matrix& storage() const { return storage_; }
  const std::vector<int>& raw_labels() const { return labels_; }
  int head() const { return head_; }
  void restore(Matrix storage, std::vector<int> labels, int head, int size) {
    storage_ = std::move(storage);
    labels_ = std::move(labels);
    head_ = head;
    size_ = size;
  }

 private:
  Matrix storage_;
  std::vector<int> labels_;
  int head_ = 0;
  int size_ = 0;
};

}  // namespace fopro
