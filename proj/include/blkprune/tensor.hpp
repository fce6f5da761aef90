#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace blkprune {

// Dense tensors are row-major matrices; 1-D quantities use column vectors.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
struct DimensionError : Error {
    using Error::Error;
};

// A caller broke an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};

// A NaN or Inf appeared in a value or gradient.
struct NumericError : Error {
    using Error::Error;
};

// File does not follow the envelope format (magic, version, schema).
struct FormatError : Error {
    using Error::Error;
};

// File header and payload disagree (truncation, byte-length mismatch).
struct CorruptionError : Error {
    using Error::Error;
};

// Pipeline stages were invoked out of order.
struct SequencingError : Error {
    using Error::Error;
};

inline std::string shape_str(Index rows, Index cols) {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
    return shape_str(m.rows(), m.cols());
}

template <typename A, typename B>
void require_same_shape(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b,
                        std::string_view what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    // x * 0 is NaN exactly for NaN and +-inf; the sum vectorizes.
    using S = typename Derived::Scalar;
    if constexpr (std::is_floating_point_v<S>) {
        return m.size() == 0 || !std::isnan((m.derived().array() * S(0)).sum());
    } else {
        return true;
    }
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view what) {
    if (!all_finite(m)) {
        throw NumericError(std::string(what) + ": non-finite value");
    }
}

}  // namespace blkprune
