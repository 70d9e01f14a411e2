#pragma once

// Momentum shadow encoders, FIFO memory banks and the momentum contrastive
// loss.

#include <aahr/autodiff.hpp>
#include <aahr/params.hpp>

#include <algorithm>
#include <cmath>

namespace aahr::momentum {

using ad::Var;

template <typename Scalar>
struct MomentumEncoder {
  EncoderParams<Mat<Scalar>> params;
  Scalar coefficient = Scalar(0.999);
};

/// shadow <- c * shadow + (1 - c) * live, for every tensor.
template <template <typename> class P, typename Scalar>
void momentum_update(const P<Mat<Scalar>>& live, P<Mat<Scalar>>& shadow, Scalar coefficient) {
  if (!(coefficient >= Scalar(0) && coefficient <= Scalar(1))) {
    throw ConfigError("momentum_update: coefficient must be in [0, 1]");
  }
  if (count_params(live) != count_params(shadow)) throw CongruenceError("momentum_update: parameter count differs");
  P<Mat<Scalar>>::visit(
      [coefficient](const std::string& name, const Mat<Scalar>& l, Mat<Scalar>& s) {
        if (l.rows() != s.rows() || l.cols() != s.cols()) {
          throw CongruenceError("momentum_update: " + name + " live " + shape_of(l) + " vs shadow " + shape_of(s));
        }
        s = coefficient * s + (Scalar(1) - coefficient) * l;
      },
      "", live, shadow);
}

template <typename Scalar>
void momentum_update(const EncoderParams<Mat<Scalar>>& live, MomentumEncoder<Scalar>& enc) {
  if (live.image_ggla.codes() != enc.params.image_ggla.codes() ||
      live.text_ggla.codes() != enc.params.text_ggla.codes()) {
    throw CongruenceError("momentum_update: GGLA transformation counts differ");
  }
  momentum_update(live, enc.params, enc.coefficient);
}

/// Fixed-capacity ring of unit-norm feature rows.
template <typename Scalar>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(Eigen::Index capacity, Eigen::Index dim) : buffer_(Mat<Scalar>::Zero(capacity, dim)) {
    if (capacity < 1 || dim < 1) throw ConfigError("memory bank: capacity and dim must be >= 1");
  }

  Eigen::Index capacity() const { return buffer_.rows(); }
  Eigen::Index dim() const { return buffer_.cols(); }
  Eigen::Index filled() const { return filled_; }
  Eigen::Index write_index() const { return write_; }
  bool empty() const { return filled_ == 0; }
  const Mat<Scalar>& buffer() const { return buffer_; }

  /// Filled rows, oldest first.
  Mat<Scalar> contents() const {
    Mat<Scalar> out(filled_, dim());
    const Eigen::Index start = filled_ < capacity() ? 0 : write_;
    for (Eigen::Index i = 0; i < filled_; ++i) out.row(i) = buffer_.row((start + i) % capacity());
    return out;
  }

  /// Filled rows in storage order (the denominator set; order is irrelevant).
  auto filled_rows() const { return buffer_.topRows(filled_); }

  template <typename Derived>
  void push(const Eigen::MatrixBase<Derived>& feats) {
    const Eigen::Index b = feats.rows();
    if (b > capacity()) {
      throw CapacityError("memory bank: batch of " + std::to_string(b) + " exceeds capacity " +
                          std::to_string(capacity()));
    }
    if (feats.cols() != dim()) throw ShapeError("memory bank: feature dim " + std::to_string(feats.cols()));
    for (Eigen::Index i = 0; i < b; ++i) {
      buffer_.row(write_) = feats.row(i).template cast<Scalar>();
      write_ = (write_ + 1) % capacity();
    }
    filled_ = std::min(filled_ + b, capacity());
  }

  /// Restores a saved state (checkpoint resume).
  void restore(Mat<Scalar> buffer, Eigen::Index write_index, Eigen::Index filled) {
    if (write_index < 0 || write_index >= buffer.rows() || filled < 0 || filled > buffer.rows()) {
      throw FormatError("memory bank: inconsistent saved state");
    }
    buffer_ = std::move(buffer);
    write_ = write_index;
    filled_ = filled;
  }

 private:
  Mat<Scalar> buffer_;
  Eigen::Index write_ = 0;
  Eigen::Index filled_ = 0;
};

template <typename Scalar, typename BankScalar>
void bank_push(MemoryBank<BankScalar>& bank, const Mat<Scalar>& feats) {
  bank.push(feats);
}

/// One direction of the momentum contrastive loss:
///   -sum_i log( exp(a_i.p_i / tau) / (exp(a_i.p_i / tau) + sum_j exp(a_i.z_j / tau)) )
/// over the positive and every filled bank row. Only the anchors carry
/// gradient; positives and bank rows are constants.
template <typename Scalar, typename BankScalar>
Var<Scalar> mcl_direction(const Var<Scalar>& anchors, const Mat<Scalar>& positives, const MemoryBank<BankScalar>& bank,
                          Scalar tau) {
  if (anchors.rows() != positives.rows() || anchors.cols() != positives.cols()) {
    throw ShapeError("mcl_loss: anchors " + shape_of(anchors.value()) + " vs positives " + shape_of(positives));
  }
  if (anchors.rows() == 0) throw ShapeError("mcl_loss: empty batch");
  const Scalar inv_tau = Scalar(1) / tau;
  const auto pos = ad::row_sums(ad::cmul_const(anchors, positives));
  std::vector<Var<Scalar>> logits{pos};
  if (!bank.empty()) {
    if (bank.dim() != anchors.cols()) throw ShapeError("mcl_loss: bank dim mismatch");
    auto& g = anchors.graph();
    const Mat<Scalar> rows = bank.filled_rows().template cast<Scalar>();
    logits.push_back(ad::matmul(anchors, g.constant(rows.transpose())));
  }
  const auto logp = ad::log_softmax_rows(inv_tau * ad::hstack(logits));
  return Scalar(-1) * ad::sum(ad::slice_cols(logp, 0, 1));
}

template <typename Scalar>
struct MclTerms {
  Var<Scalar> image_to_text;
  Var<Scalar> text_to_image;
  Var<Scalar> total;
};

/// Image anchors against text momentum features (and the text bank), plus the
/// symmetric text-to-image term.
template <typename Scalar, typename BankScalar>
MclTerms<Scalar> mcl_loss_terms(const Var<Scalar>& images, const Var<Scalar>& texts, const Mat<Scalar>& momentum_images,
                                const Mat<Scalar>& momentum_texts, const MemoryBank<BankScalar>& image_bank,
                                const MemoryBank<BankScalar>& text_bank, Scalar tau) {
  const auto i2t = mcl_direction(images, momentum_texts, text_bank, tau);
  const auto t2i = mcl_direction(texts, momentum_images, image_bank, tau);
  return {i2t, t2i, i2t + t2i};
}

template <typename Scalar, typename BankScalar>
Scalar mcl_loss(const Mat<Scalar>& anchors, const Mat<Scalar>& positives, const MemoryBank<BankScalar>& bank,
                Scalar tau) {
  ad::Graph<Scalar> g;
  return mcl_direction(g.constant(anchors), positives, bank, tau).scalar();
}

}  // namespace aahr::momentum
