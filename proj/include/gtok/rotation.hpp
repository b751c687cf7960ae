#pragma once

#include <array>
#include <cmath>

#include "gtok/tensor.hpp"

namespace gtok {

/// Row-major 3x3 matrix.
template <typename T>
using Mat3 = std::array<T, 9>;

template <typename T>
Mat3<T> mat3_identity() {
    return {T(1), T(0), T(0), T(0), T(1), T(0), T(0), T(0), T(1)};
}

template <typename T>
Mat3<T> mat3_mul(const Mat3<T>& a, const Mat3<T>& b) {
    Mat3<T> c{};
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) {
            const T av = a[static_cast<std::size_t>(i * 3 + k)];
            for (int j = 0; j < 3; ++j) {
                c[static_cast<std::size_t>(i * 3 + j)] += av * b[static_cast<std::size_t>(k * 3 + j)];
            }
        }
    }
    return c;
}

template <typename T>
Mat3<T> mat3_transpose(const Mat3<T>& a) {
    return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

template <typename T>
T mat3_det(const Mat3<T>& a) {
    return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
           a[2] * (a[3] * a[7] - a[4] * a[6]);
}

/// Rodrigues formula; axis need not be normalized (it is normalized here,
/// zero axis gives the identity).
template <typename T>
Mat3<T> axis_angle(T ax, T ay, T az, T angle) {
    const T n = std::sqrt(ax * ax + ay * ay + az * az);
    if (n < T(1e-12)) {
        return mat3_identity<T>();
    }
    const T x = ax / n, y = ay / n, z = az / n;
    const T c = std::cos(angle), s = std::sin(angle), t = T(1) - c;
    return {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
            t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
            t * x * z - s * y, t * y * z + s * x, t * z * z + c};
}

template <typename T>
bool is_rotation(const Mat3<T>& r, T tol = T(1e-5)) {
    const Mat3<T> rtr = mat3_mul(mat3_transpose(r), r);
    const Mat3<T> id = mat3_identity<T>();
    for (int i = 0; i < 9; ++i) {
        if (std::abs(rtr[static_cast<std::size_t>(i)] - id[static_cast<std::size_t>(i)]) > tol) {
            return false;
        }
    }
    return std::abs(mat3_det(r) - T(1)) <= tol;
}

/// 6D rotation representation: the first two columns of R, first column then
/// second. The identity encodes to (1,0,0,0,1,0).
template <typename T>
void rot6d_encode(const Mat3<T>& r, T out[6]) {
    out[0] = r[0];
    out[1] = r[3];
    out[2] = r[6];
    out[3] = r[1];
    out[4] = r[4];
    out[5] = r[7];
}

/// Gram-Schmidt decode. Degenerate inputs (near-zero or near-parallel
/// columns) fall back to fixed orthogonal directions so the result is always
/// a proper rotation.
template <typename T>
Mat3<T> rot6d_decode(const T in[6]) {
    T b1[3] = {in[0], in[1], in[2]};
    T n1 = std::sqrt(b1[0] * b1[0] + b1[1] * b1[1] + b1[2] * b1[2]);
    if (n1 < T(1e-8)) {
        b1[0] = T(1);
        b1[1] = T(0);
        b1[2] = T(0);
        n1 = T(1);
    }
    for (int i = 0; i < 3; ++i) {
        b1[i] /= n1;
    }
    T a2[3] = {in[3], in[4], in[5]};
    const T dot = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    T b2[3] = {a2[0] - dot * b1[0], a2[1] - dot * b1[1], a2[2] - dot * b1[2]};
    T n2 = std::sqrt(b2[0] * b2[0] + b2[1] * b2[1] + b2[2] * b2[2]);
    if (n2 < T(1e-8)) {
        // any direction orthogonal to b1
        const T cand[3] = {std::abs(b1[0]) < T(0.9) ? T(1) : T(0), std::abs(b1[0]) < T(0.9) ? T(0) : T(1), T(0)};
        const T d = b1[0] * cand[0] + b1[1] * cand[1] + b1[2] * cand[2];
        b2[0] = cand[0] - d * b1[0];
        b2[1] = cand[1] - d * b1[1];
        b2[2] = cand[2] - d * b1[2];
        n2 = std::sqrt(b2[0] * b2[0] + b2[1] * b2[1] + b2[2] * b2[2]);
    }
    for (int i = 0; i < 3; ++i) {
        b2[i] /= n2;
    }
    const T b3[3] = {b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]};
    return {b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
}

}  // namespace gtok
