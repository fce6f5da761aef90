#pragma once

// Pruning importance scores.
//
//   wanda:  S_ij = ||X_j||_2 * |W_ij|
//   rgs:    S_ij = (alpha / N * G_ij + ||X_j||_2) * |W_ij|
//
// where G_ij = sqrt(sum_n (dL_n / dW_ij)^2) and L_n = ||block(X_n)||_2 is the
// block-local loss of calibration sample n.

#include "blkprune/calib.hpp"

#include <string>

namespace blkprune {

enum class Criterion { Wanda, Rgs };

struct ScoreConfig {
    Criterion criterion = Criterion::Rgs;
    double alpha = 100.0;
};

template <typename Scalar>
class GradAccumulator {
  public:
    explicit GradAccumulator(const ModelConfig& cfg) {
        for (LinearId id : kLinearIds) {
            auto [r, c] = linear_shape(cfg, id);
            sums_[index_of(id)] = Matrix<Scalar>::Zero(r, c);
        }
    }

    // Adds the elementwise square of one sample's gradients.
    void add(const GradStore<Scalar>& grads) {
        if (finalized_) throw SequencingError("GradAccumulator: add after finalize");
        for (LinearId id : kLinearIds) {
            auto& s = sums_[index_of(id)];
            s += grads.get(std::string(linear_name(id)), s.rows(), s.cols())
                     .array()
                     .square()
                     .matrix();
        }
        ++samples_;
    }

    void finalize() {
        if (finalized_) return;
        for (auto& s : sums_) s = s.array().sqrt().matrix();
        finalized_ = true;
    }

    bool finalized() const { return finalized_; }
    std::size_t samples() const { return samples_; }

    // sqrt(sum_n g_n^2) once finalized, otherwise the running sum of squares.
    const Matrix<Scalar>& term(LinearId id) const { return sums_[index_of(id)]; }

    Scalar frobenius_norm() const {
        Scalar sq = 0;
        for (const auto& s : sums_) {
            sq += finalized_ ? s.squaredNorm() : s.sum();
        }
        return std::sqrt(sq);
    }

  private:
    std::array<Matrix<Scalar>, kNumLinears> sums_;
    std::size_t samples_ = 0;
    bool finalized_ = false;
};

// Gradient of ||block(X)||_2 with respect to the seven linear weights of `block`.
template <typename Scalar>
GradStore<Scalar> regional_gradient(const DecoderBlockParams<Scalar>& block,
                                    const Matrix<Scalar>& x, const ModelConfig& cfg) {
    Tape<Scalar> tape;
    auto w = bind_block(tape, block, Trainable::Linears);
    auto out = block_forward(w, tape.constant(x), cfg).out;
    return tape.backward(l2_norm(out));
}

// One backward pass per sample; squares are summed in sample-index order.
template <typename Scalar>
GradAccumulator<Scalar> accumulate_regional_gradients(const DecoderBlockParams<Scalar>& block,
                                                      std::span<const Matrix<Scalar>> inputs,
                                                      const ModelConfig& cfg,
                                                      int layer = -1) {
    if (inputs.empty()) throw ContractError("accumulate_regional_gradients: no samples");
    GradAccumulator<Scalar> acc(cfg);
    for (std::size_t n = 0; n < inputs.size(); ++n) {
        GradStore<Scalar> g;
        try {
            g = regional_gradient(block, inputs[n], cfg);
        } catch (const NumericError& e) {
            throw NumericError("regional gradient, block " + std::to_string(layer) + ", sample " +
                               std::to_string(n) + ": " + e.what());
        }
        for (LinearId id : kLinearIds) {
            if (!all_finite(g.at(std::string(linear_name(id))))) {
                throw NumericError("regional gradient, block " + std::to_string(layer) +
                                   ", layer " + std::string(linear_name(id)) + ", sample " +
                                   std::to_string(n) + ": non-finite gradient");
            }
        }
        acc.add(g);
    }
    acc.finalize();
    return acc;
}

template <typename Scalar>
Matrix<Scalar> wanda_score(const Matrix<Scalar>& weight, const Vector<Scalar>& act_norms) {
    if (act_norms.size() != weight.cols()) {
        throw DimensionError("wanda_score: " + std::to_string(act_norms.size()) +
                             " activation norms for input width " + std::to_string(weight.cols()));
    }
    Matrix<Scalar> s = weight.cwiseAbs();
    s.array().rowwise() *= act_norms.transpose().array();
    return s;
}

// With alpha == 0 the gradient term contributes an exact +0 and the result
// equals wanda_score bit for bit.
template <typename Scalar>
Matrix<Scalar> rgs_score(const Matrix<Scalar>& weight, const Vector<Scalar>& act_norms,
                         const Matrix<Scalar>& grad_term, std::size_t grad_samples, double alpha,
                         std::size_t n_samples) {
    if (act_norms.size() != weight.cols()) {
        throw DimensionError("rgs_score: activation norm length does not match input width");
    }
    require_same_shape(weight, grad_term, "rgs_score");
    if (grad_samples != n_samples) {
        throw ContractError("rgs_score: accumulator saw " + std::to_string(grad_samples) +
                            " samples, N given as " + std::to_string(n_samples));
    }
    if (!(alpha >= 0.0)) throw ContractError("rgs_score: alpha must be non-negative");
    if (n_samples == 0) throw ContractError("rgs_score: N must be positive");
    const Scalar coeff = static_cast<Scalar>(alpha / static_cast<double>(n_samples));
    Matrix<Scalar> inner = grad_term * coeff;
    inner.array().rowwise() += act_norms.transpose().array();
    return inner.cwiseProduct(weight.cwiseAbs());
}

template <typename Scalar>
Matrix<Scalar> rgs_score(const Matrix<Scalar>& weight, const Vector<Scalar>& act_norms,
                         const GradAccumulator<Scalar>& grads, LinearId id, double alpha,
                         std::size_t n_samples) {
    if (!grads.finalized()) throw SequencingError("rgs_score: accumulator not finalized");
    return rgs_score(weight, act_norms, grads.term(id), grads.samples(), alpha, n_samples);
}

}  // namespace blkprune
