#pragma once

#include <array>
#include <cmath>

#include "geokit/common.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Truncated bivariate Taylor series ("jets") of order N at a point, used to
// evaluate metric components together with their first and second partials
// without finite differences.  Coefficients are stored by total degree:
//
//   order 0: c[0]                            = f
//   order 1: c[1], c[2]                      = f_u, f_v
//   order 2: c[3], c[4], c[5]                = f_uu/2!, f_uv, f_vv/2!
//   order 3: c[6], c[7], c[8], c[9]          = f_uuu/6, f_uuv/2, f_uvv/2, f_vvv/6
//
// i.e. c holds Taylor coefficients, not raw derivatives.  N = 3 is enough to
// carry an embedding whose metric needs two derivatives.
// ---------------------------------------------------------------------------

template <int N>
struct Jet {
    static_assert(N >= 1 && N <= 3);
    static constexpr int kTerms = (N + 1) * (N + 2) / 2;
    std::array<double, kTerms> c{};

    Jet() = default;
    explicit Jet(double value) { c[0] = value; }

    static Jet constant(double value) { return Jet(value); }
    // The coordinate functions u, v at base point (u0, v0).
    static Jet var_u(double u0) {
        Jet j(u0);
        j.c[1] = 1.0;
        return j;
    }
    static Jet var_v(double v0) {
        Jet j(v0);
        j.c[2] = 1.0;
        return j;
    }

    double value() const { return c[0]; }
    double du() const { return c[1]; }
    double dv() const { return c[2]; }
    double duu() const { static_assert(N >= 2); return 2.0 * c[3]; }
    double duv() const { static_assert(N >= 2); return c[4]; }
    double dvv() const { static_assert(N >= 2); return 2.0 * c[5]; }

    Jet operator-() const {
        Jet r;
        for (int i = 0; i < kTerms; ++i) r.c[i] = -c[i];
        return r;
    }
    Jet operator+(const Jet& o) const {
        Jet r;
        for (int i = 0; i < kTerms; ++i) r.c[i] = c[i] + o.c[i];
        return r;
    }
    Jet operator-(const Jet& o) const {
        Jet r;
        for (int i = 0; i < kTerms; ++i) r.c[i] = c[i] - o.c[i];
        return r;
    }
    Jet operator+(double s) const {
        Jet r = *this;
        r.c[0] += s;
        return r;
    }
    Jet operator-(double s) const {
        Jet r = *this;
        r.c[0] -= s;
        return r;
    }
    Jet operator*(double s) const {
        Jet r;
        for (int i = 0; i < kTerms; ++i) r.c[i] = c[i] * s;
        return r;
    }
    Jet operator/(double s) const { return (*this) * (1.0 / s); }
};

namespace jet_detail {

// Index of monomial u^i v^j in the degree-graded layout.
constexpr int term_index(int i, int j) {
    const int d = i + j;
    return d * (d + 1) / 2 + j;
}

template <int N>
Jet<N> multiply(const Jet<N>& a, const Jet<N>& b) {
    Jet<N> r;
    for (int da = 0; da <= N; ++da)
        for (int ja = 0; ja <= da; ++ja) {
            const double ca = a.c[term_index(da - ja, ja)];
            if (ca == 0.0) continue;
            for (int db = 0; db + da <= N; ++db)
                for (int jb = 0; jb <= db; ++jb) {
                    const double cb = b.c[term_index(db - jb, jb)];
                    if (cb == 0.0) continue;
                    r.c[term_index(da + db - ja - jb, ja + jb)] += ca * cb;
                }
        }
    return r;
}

// Compose a univariate analytic function with known derivatives at a.value()
// into the jet: f(a) where ders[k] = f^(k)(a0) / k!.
template <int N>
Jet<N> compose(const Jet<N>& a, const std::array<double, N + 1>& ders) {
    Jet<N> h = a;
    h.c[0] = 0.0;  // the "small" part
    // Horner in h: result = ders[0] + h*(ders[1] + h*(ders[2] + ...))
    Jet<N> r = Jet<N>::constant(ders[N]);
    for (int k = N - 1; k >= 0; --k) {
        r = multiply(h, r);
        r.c[0] += ders[k];
    }
    return r;
}

}  // namespace jet_detail

template <int N>
Jet<N> operator*(const Jet<N>& a, const Jet<N>& b) {
    return jet_detail::multiply(a, b);
}
template <int N>
Jet<N> operator*(double s, const Jet<N>& a) {
    return a * s;
}
template <int N>
Jet<N> operator+(double s, const Jet<N>& a) {
    return a + s;
}
template <int N>
Jet<N> operator-(double s, const Jet<N>& a) {
    return (-a) + s;
}

template <int N>
Jet<N> reciprocal(const Jet<N>& a) {
    const double a0 = a.value();
    if (a0 == 0.0) throw NumericalError("jet reciprocal at zero");
    std::array<double, N + 1> d{};
    double p = 1.0 / a0;
    for (int k = 0; k <= N; ++k) {
        d[k] = p;  // (1/x)^(k)/k! at a0 = (-1)^k / a0^{k+1}
        p *= -1.0 / a0;
    }
    return jet_detail::compose(a, d);
}

template <int N>
Jet<N> operator/(const Jet<N>& a, const Jet<N>& b) {
    return a * reciprocal(b);
}
template <int N>
Jet<N> operator/(double s, const Jet<N>& b) {
    return reciprocal(b) * s;
}

template <int N>
Jet<N> sqrt(const Jet<N>& a) {
    const double a0 = a.value();
    if (a0 <= 0.0) throw NumericalError("jet sqrt of non-positive value");
    const double s = std::sqrt(a0);
    std::array<double, N + 1> d{};
    d[0] = s;
    if constexpr (N >= 1) d[1] = 0.5 / s;
    if constexpr (N >= 2) d[2] = -0.125 / (s * a0);
    if constexpr (N >= 3) d[3] = 0.0625 / (s * a0 * a0);
    return jet_detail::compose(a, d);
}

template <int N>
Jet<N> exp(const Jet<N>& a) {
    const double e = std::exp(a.value());
    std::array<double, N + 1> d{};
    double fact = 1.0;
    for (int k = 0; k <= N; ++k) {
        d[k] = e / fact;
        fact *= (k + 1);
    }
    return jet_detail::compose(a, d);
}

// Partial derivative: maps an order-N jet to an order-(N-1) jet of df/du or df/dv.
template <int N>
Jet<N - 1> d_du(const Jet<N>& a) {
    Jet<N - 1> r;
    for (int d = 1; d <= N; ++d)
        for (int j = 0; j <= d; ++j) {
            const int i = d - j;
            if (i == 0) continue;
            r.c[jet_detail::term_index(i - 1, j)] = a.c[jet_detail::term_index(i, j)] * i;
        }
    return r;
}

template <int N>
Jet<N - 1> d_dv(const Jet<N>& a) {
    Jet<N - 1> r;
    for (int d = 1; d <= N; ++d)
        for (int j = 0; j <= d; ++j) {
            const int i = d - j;
            if (j == 0) continue;
            r.c[jet_detail::term_index(i, j - 1)] = a.c[jet_detail::term_index(i, j)] * j;
        }
    return r;
}

using Jet2 = Jet<2>;
using Jet3 = Jet<3>;

}  // namespace geokit
