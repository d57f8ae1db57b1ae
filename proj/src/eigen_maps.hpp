#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace mfi::detail {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<MatrixRM> map(float* p, std::int64_t rows, std::int64_t cols) {
    return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
inline Eigen::Map<const MatrixRM> map(const float* p, std::int64_t rows, std::int64_t cols) {
    return {p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

}  // namespace mfi::detail
