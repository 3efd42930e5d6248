#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace geokit {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

// ---------------------------------------------------------------------------
// Error hierarchy.  DomainError covers bad inputs (points outside charts,
// non-simple curves, inadmissible windows); NumericalError covers failures
// of the numerics themselves (step underflow, Newton divergence, no return).
// The CLI maps them to exit codes 2 and 3.
// ---------------------------------------------------------------------------

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MetricError : DomainError {
    explicit MetricError(const std::string& msg) : DomainError(msg) {}
};

struct NotSimpleError : DomainError {
    explicit NotSimpleError(const std::string& msg) : DomainError(msg) {}
};

struct FormulaInapplicableError : DomainError {
    explicit FormulaInapplicableError(const std::string& msg) : DomainError(msg) {}
};

struct MainCaseViolationError : DomainError {
    explicit MainCaseViolationError(const std::string& msg) : DomainError(msg) {}
};

struct IntegrationError : NumericalError {
    IntegrationError(const std::string& msg, double t) : NumericalError(msg), where(t) {}
    double where;
};

struct NoConvergenceError : NumericalError {
    NoConvergenceError(const std::string& msg, double res)
        : NumericalError(msg), last_residual(res) {}
    double last_residual;
};

struct NoReturnError : NumericalError {
    explicit NoReturnError(const std::string& msg) : NumericalError(msg) {}
};

struct GrazingError : NumericalError {
    explicit GrazingError(const std::string& msg) : NumericalError(msg) {}
};

// ---------------------------------------------------------------------------
// Tiny fixed-size linear algebra.  Everything in the library is 2x2 or 3D.
// ---------------------------------------------------------------------------

struct Vec2 {
    double x = 0.0, y = 0.0;

    Vec2() = default;
    Vec2(double x_, double y_) : x(x_), y(y_) {}

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    Vec2 operator/(double s) const { return {x / s, y / s}; }
    Vec2 operator-() const { return {-x, -y}; }
    Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
    Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }

    double norm() const { return std::hypot(x, y); }
    double norm2() const { return x * x + y * y; }
};

inline Vec2 operator*(double s, const Vec2& v) { return v * s; }
inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double cross(const Vec2& a, const Vec2& b) { return a.x * b.y - a.y * b.x; }

struct Mat2 {
    // row-major: [[a, b], [c, d]]
    double a = 0.0, b = 0.0, c = 0.0, d = 0.0;

    Mat2() = default;
    Mat2(double a_, double b_, double c_, double d_) : a(a_), b(b_), c(c_), d(d_) {}

    static Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }

    Vec2 operator*(const Vec2& v) const { return {a * v.x + b * v.y, c * v.x + d * v.y}; }
    Mat2 operator*(const Mat2& m) const {
        return {a * m.a + b * m.c, a * m.b + b * m.d,
                c * m.a + d * m.c, c * m.b + d * m.d};
    }
    Mat2 operator+(const Mat2& m) const { return {a + m.a, b + m.b, c + m.c, d + m.d}; }
    Mat2 operator-(const Mat2& m) const { return {a - m.a, b - m.b, c - m.c, d - m.d}; }
    Mat2 operator*(double s) const { return {a * s, b * s, c * s, d * s}; }

    double det() const { return a * d - b * c; }
    double trace() const { return a + d; }
    Mat2 transpose() const { return {a, c, b, d}; }

    Mat2 inverse() const {
        const double dt = det();
        if (std::abs(dt) < 1e-300) throw NumericalError("Mat2::inverse: singular matrix");
        return {d / dt, -b / dt, -c / dt, a / dt};
    }
};

// Solve M x = r, 2x2.
inline Vec2 solve2(const Mat2& m, const Vec2& r) {
    const double dt = m.det();
    if (std::abs(dt) < 1e-300) throw NumericalError("solve2: singular matrix");
    return {(r.x * m.d - r.y * m.b) / dt, (m.a * r.y - m.c * r.x) / dt};
}

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

// ---------------------------------------------------------------------------
// Misc numeric helpers.
// ---------------------------------------------------------------------------

// Wrap x into [0, period).
inline double wrap_periodic(double x, double period) {
    double r = std::fmod(x, period);
    if (r < 0.0) r += period;
    return r;
}

// Signed representative of x modulo period in [-period/2, period/2).
inline double wrap_symmetric(double x, double period) {
    double r = wrap_periodic(x, period);
    if (r >= 0.5 * period) r -= period;
    return r;
}

// Ordered parallel map: fn(i) for i in [0, n), results in index order.
// Deterministic regardless of worker count.
template <typename T>
std::vector<T> parallel_map(std::size_t n, int workers, const std::function<T(std::size_t)>& fn) {
    std::vector<T> out(n);
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    const int nw = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    std::vector<std::thread> pool;
    pool.reserve(nw);
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int w = 0; w < nw; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = static_cast<std::size_t>(w); i < n; i += nw) out[i] = fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return out;
}

// Adaptive Simpson quadrature with absolute+relative tolerance.
namespace detail {
inline double simpson_rec(const std::function<double(double)>& f, double a, double b,
                          double fa, double fm, double fb, double whole, double tol, int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    if (depth <= 0) return left + right + delta / 15.0;
    if (std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
    return simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}
}  // namespace detail

inline double integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                                 double rel_tol = 1e-10, int max_depth = 40) {
    if (a == b) return 0.0;
    // Seed with a coarse composite pass to set the absolute tolerance scale.
    const int n0 = 16;
    double coarse = 0.0;
    const double h = (b - a) / n0;
    for (int i = 0; i < n0; ++i) coarse += std::abs(f(a + (i + 0.5) * h)) * std::abs(h);
    const double tol = rel_tol * std::max(coarse, 1e-30);
    double total = 0.0;
    for (int i = 0; i < n0; ++i) {
        const double x0 = a + i * h, x1 = a + (i + 1) * h, xm = 0.5 * (x0 + x1);
        const double f0 = f(x0), f1 = f(x1), fm = f(xm);
        const double whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
        total += detail::simpson_rec(f, x0, x1, f0, fm, f1, whole, tol / n0, max_depth);
    }
    return total;
}

}  // namespace geokit
