#pragma once

// Dense linear algebra primitives, precision emulation and deterministic RNG
// shared by the solver, layer and task code. Everything operates on row-major
// double storage; reduced precision is emulated by rounding at operation
// boundaries.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace gka {

enum class Precision { Full, Single, Bf16 };

inline const char* precision_name(Precision p) {
    switch (p) {
        case Precision::Full: return "full";
        case Precision::Single: return "single";
        case Precision::Bf16: return "bf16";
    }
    return "?";
}

inline Precision parse_precision(const std::string& s) {
    if (s == "full") return Precision::Full;
    if (s == "single") return Precision::Single;
    if (s == "bf16") return Precision::Bf16;
    throw std::invalid_argument("unknown precision: " + s);
}

// Round-to-nearest-even truncation of a float to the bf16 representable set
// (8-bit exponent, 7-bit mantissa). Idempotent by construction.
inline float round_bf16(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, sizeof(u));
    if ((u & 0x7F800000u) == 0x7F800000u) {
        // Inf/NaN: keep a quiet payload, drop low mantissa bits.
        if (u & 0x007FFFFFu) u |= 0x00400000u;
        u &= 0xFFFF0000u;
    } else {
        std::uint32_t lsb = (u >> 16) & 1u;
        u += 0x7FFFu + lsb;
        u &= 0xFFFF0000u;
    }
    float out;
    std::memcpy(&out, &u, sizeof(out));
    return out;
}

inline double round_scalar(double x, Precision mode) {
    switch (mode) {
        case Precision::Full: return x;
        case Precision::Single: return static_cast<double>(static_cast<float>(x));
        case Precision::Bf16: return static_cast<double>(round_bf16(static_cast<float>(x)));
    }
    return x;
}

using Vector = std::vector<double>;

inline void round_inplace(Vector& v, Precision mode) {
    if (mode == Precision::Full) return;
    for (double& x : v) x = round_scalar(x, mode);
}

struct Matrix {
    int rows = 0;
    int cols = 0;
    Vector data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
    }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix outer(const Vector& u, const Vector& v) {
    Matrix m(static_cast<int>(u.size()), static_cast<int>(v.size()));
    for (size_t i = 0; i < u.size(); ++i)
        for (size_t j = 0; j < v.size(); ++j) m(static_cast<int>(i), static_cast<int>(j)) = u[i] * v[j];
    return m;
}

inline double dot(const Vector& a, const Vector& b) {
    check(a.size() == b.size(), "dot: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

// y += alpha * x
inline void axpy(double alpha, const Vector& x, Vector& y) {
    check(x.size() == y.size(), "axpy: size mismatch");
    for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector scaled(const Vector& x, double alpha) {
    Vector y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = alpha * x[i];
    return y;
}

inline Matrix matmul(const Matrix& a, const Matrix& b, Precision mode = Precision::Full) {
    check(a.cols == b.rows, "matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    if (mode == Precision::Bf16) {
        // Inputs rounded to bf16, accumulation kept in 32-bit, result rounded.
        for (int i = 0; i < a.rows; ++i) {
            for (int j = 0; j < b.cols; ++j) {
                float acc = 0.0f;
                for (int k = 0; k < a.cols; ++k)
                    acc += round_bf16(static_cast<float>(a(i, k))) * round_bf16(static_cast<float>(b(k, j)));
                c(i, j) = static_cast<double>(round_bf16(acc));
            }
        }
    } else {
        for (int i = 0; i < a.rows; ++i) {
            for (int j = 0; j < b.cols; ++j) {
                double acc = 0.0;
                for (int k = 0; k < a.cols; ++k)
                    acc += round_scalar(a(i, k), mode) * round_scalar(b(k, j), mode);
                c(i, j) = round_scalar(acc, mode);
            }
        }
    }
    return c;
}

inline Vector matvec(const Matrix& a, const Vector& x, Precision mode = Precision::Full) {
    check(a.cols == static_cast<int>(x.size()), "matvec: dimension mismatch");
    Vector y(a.rows);
    if (mode == Precision::Bf16) {
        for (int i = 0; i < a.rows; ++i) {
            float acc = 0.0f;
            for (int k = 0; k < a.cols; ++k)
                acc += round_bf16(static_cast<float>(a(i, k))) * round_bf16(static_cast<float>(x[k]));
            y[i] = static_cast<double>(round_bf16(acc));
        }
    } else {
        for (int i = 0; i < a.rows; ++i) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += round_scalar(a(i, k), mode) * round_scalar(x[k], mode);
            y[i] = round_scalar(acc, mode);
        }
    }
    return y;
}

// A^T x without materializing the transpose.
inline Vector matvec_t(const Matrix& a, const Vector& x) {
    check(a.rows == static_cast<int>(x.size()), "matvec_t: dimension mismatch");
    Vector y(a.cols, 0.0);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) y[j] += a(i, j) * x[i];
    return y;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double frobenius_inner(const Matrix& a, const Matrix& b) {
    check(a.same_shape(b), "frobenius_inner: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

struct NotSpdError : std::runtime_error {
    explicit NotSpdError(const std::string& msg) : std::runtime_error(msg) {}
};

// Cholesky factor L with H = L L^T. Throws NotSpdError on a nonpositive pivot.
inline Matrix cholesky(const Matrix& h) {
    check(h.rows == h.cols, "cholesky: matrix not square");
    const int n = h.rows;
    Matrix l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = h(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s))
                    throw NotSpdError("cholesky: nonpositive pivot at row " + std::to_string(i));
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return l;
}

// Direct solve of H x = q for symmetric positive definite H.
inline Vector solve_exact(const Matrix& h, const Vector& q) {
    check(h.rows == static_cast<int>(q.size()), "solve_exact: dimension mismatch");
    const Matrix l = cholesky(h);
    const int n = h.rows;
    Vector y(n), x(n);
    for (int i = 0; i < n; ++i) {
        double s = q[i];
        for (int k = 0; k < i; ++k) s -= l(i, k) * y[k];
        y[i] = s / l(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = y[i];
        for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
        x[i] = s / l(i, i);
    }
    return x;
}

// Counter-based deterministic RNG (splitmix64 finalizer over seed+counter).
// Identical seed and call sequence give identical streams regardless of
// thread count, since each consumer owns its own instance.
struct SeededRng {
    std::uint64_t seed;
    std::uint64_t counter = 0;

    explicit SeededRng(std::uint64_t s) : seed(s) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    double normal() {
        // Box-Muller; two uniforms consumed per draw, cosine branch kept.
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    Vector normal_vector(int n) {
        Vector v(n);
        for (int i = 0; i < n; ++i) v[i] = normal();
        return v;
    }
};

}  // namespace gka
