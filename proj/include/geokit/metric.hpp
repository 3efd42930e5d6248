#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "geokit/charts.hpp"
#include "geokit/common.hpp"
#include "geokit/jet.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Metric jets: g_ij with first and second partials, Christoffel symbols and
// Gaussian curvature at one point.  All closed-form metric kinds produce the
// partials analytically through the jet algebra; the Fermi-patched kind
// assembles them by Richardson-extrapolated finite differences of a pointwise
// evaluation (see fermi.hpp).
// ---------------------------------------------------------------------------

struct MetricJet {
    Mat2 g;                       // metric components
    Mat2 dg[2];                   // dg[k] = d g / d x^k
    Mat2 d2g[3];                  // d2g: [0]=uu, [1]=uv, [2]=vv
    double christoffel[2][2][2];  // christoffel[i][j][k] = Gamma^i_jk
    double curvature = 0.0;

    double gamma(int i, int j, int k) const { return christoffel[i][j][k]; }
};

struct BumpTerm {
    Vec3 center;       // unit-sphere position of the bump center
    double radius;     // angular radius of the support (radians)
    double amplitude;  // conformal-exponent peak value
};

class MetricField;

// Hook implemented by the Fermi-patched construction (fermi.hpp).  Keeps
// metric.hpp free of any dependency on the perturbation machinery.
class PatchedMetricBase {
public:
    virtual ~PatchedMetricBase() = default;
    virtual const MetricField& base_metric() const = 0;
    // Cheap chordal prefilter: false guarantees the point is outside the
    // patched zone, so evaluation may take the analytic base path bit-exactly.
    virtual bool near_patch(const SurfacePoint& p) const = 0;
    // Pointwise metric value of the patched metric (base value when the Fermi
    // inverse lands outside the patched window).
    virtual Mat2 eval_g(const SurfacePoint& p) const = 0;
};

class MetricField {
public:
    enum class Kind { Round, Ellipsoid, BumpedRound, FermiPatched };

    static MetricField round(double radius) {
        MetricField m;
        m.kind_ = Kind::Round;
        m.axes_ = {radius, radius, radius};
        return m;
    }

    static MetricField ellipsoid(double a, double b, double c) {
        MetricField m;
        m.kind_ = Kind::Ellipsoid;
        m.axes_ = {a, b, c};
        return m;
    }

    static MetricField bumped_round(double radius, std::vector<BumpTerm> bumps) {
        MetricField m;
        m.kind_ = Kind::BumpedRound;
        m.axes_ = {radius, radius, radius};
        for (auto& b : bumps) {
            const double n = b.center.norm();
            b.center = b.center * (1.0 / n);
        }
        m.bumps_ = std::move(bumps);
        return m;
    }

    static MetricField fermi_patched(std::shared_ptr<const PatchedMetricBase> patch) {
        MetricField m;
        m.kind_ = Kind::FermiPatched;
        m.patch_ = std::move(patch);
        return m;
    }

    Kind kind() const { return kind_; }
    const Vec3& semi_axes() const { return axes_; }
    double radius() const { return axes_.x; }
    const std::vector<BumpTerm>& bumps() const { return bumps_; }
    const std::shared_ptr<const PatchedMetricBase>& patch() const { return patch_; }

private:
    Kind kind_ = Kind::Round;
    Vec3 axes_{1.0, 1.0, 1.0};
    std::vector<BumpTerm> bumps_;
    std::shared_ptr<const PatchedMetricBase> patch_;
};

namespace metric_detail {

// g_ij as order-2 jets for the closed-form kinds.
inline void metric_component_jets(const MetricField& m, const SurfacePoint& p,
                                  Jet2& g11, Jet2& g12, Jet2& g22) {
    Jet3 X, Y, Z;
    sphere_embedding_jets(p, X, Y, Z);
    const Vec3& ax = m.semi_axes();

    // Tangent jets of the (possibly anisotropically scaled) embedding.
    const Jet2 Eu[3] = {d_du(X) * ax.x, d_du(Y) * ax.y, d_du(Z) * ax.z};
    const Jet2 Ev[3] = {d_dv(X) * ax.x, d_dv(Y) * ax.y, d_dv(Z) * ax.z};

    g11 = Eu[0] * Eu[0] + Eu[1] * Eu[1] + Eu[2] * Eu[2];
    g12 = Eu[0] * Ev[0] + Eu[1] * Ev[1] + Eu[2] * Ev[2];
    g22 = Ev[0] * Ev[0] + Ev[1] * Ev[1] + Ev[2] * Ev[2];

    if (m.kind() == MetricField::Kind::BumpedRound && !m.bumps().empty()) {
        // Conformal factor exp(2*phi), phi a sum of compactly supported bumps
        // in the chordal variable s = (1 - <P, C>)/(1 - cos(radius)).
        Jet3 phi3 = Jet3::constant(0.0);
        for (const auto& b : m.bumps()) {
            const Jet3 cosd = X * b.center.x + Y * b.center.y + Z * b.center.z;
            const double denom = 1.0 - std::cos(b.radius);
            const Jet3 s = (1.0 - cosd) / denom;
            if (s.value() >= 1.0 - 1e-14) continue;  // outside support
            phi3 = phi3 + b.amplitude * exp(1.0 - reciprocal(1.0 - s));
        }
        Jet2 phi;
        for (int i = 0; i < Jet2::kTerms; ++i) phi.c[i] = phi3.c[i];
        const Jet2 conf = exp(2.0 * phi);
        g11 = conf * g11;
        g12 = conf * g12;
        g22 = conf * g22;
    }
}

inline void fill_christoffels(MetricJet& jet) {
    const Mat2 ginv = jet.g.inverse();
    const double gi[2][2] = {{ginv.a, ginv.b}, {ginv.c, ginv.d}};
    auto dg = [&](int k, int i, int j) -> double {
        const Mat2& M = jet.dg[k];
        return i == 0 ? (j == 0 ? M.a : M.b) : (j == 0 ? M.c : M.d);
    };
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) {
                double s = 0.0;
                for (int l = 0; l < 2; ++l)
                    s += gi[i][l] * (dg(j, l, k) + dg(k, l, j) - dg(l, j, k));
                jet.christoffel[i][j][k] = 0.5 * s;
            }
}

// Brioschi formula: Gaussian curvature from g and its first two partials.
inline double brioschi_curvature(const MetricJet& j) {
    const double E = j.g.a, F = j.g.b, G = j.g.d;
    const double Eu = j.dg[0].a, Ev = j.dg[1].a;
    const double Fu = j.dg[0].b, Fv = j.dg[1].b;
    const double Gu = j.dg[0].d, Gv = j.dg[1].d;
    const double Evv = j.d2g[2].a, Fuv = j.d2g[1].b, Guu = j.d2g[0].d;

    const double m00 = -0.5 * Evv + Fuv - 0.5 * Guu;
    auto det3 = [](double a11, double a12, double a13, double a21, double a22, double a23,
                   double a31, double a32, double a33) {
        return a11 * (a22 * a33 - a23 * a32) - a12 * (a21 * a33 - a23 * a31) +
               a13 * (a21 * a32 - a22 * a31);
    };
    const double d1 = det3(m00, 0.5 * Eu, Fu - 0.5 * Ev,
                           Fv - 0.5 * Gu, E, F,
                           0.5 * Gv, F, G);
    const double d2 = det3(0.0, 0.5 * Ev, 0.5 * Gu,
                           0.5 * Ev, E, F,
                           0.5 * Gu, F, G);
    const double den = E * G - F * F;
    return (d1 - d2) / (den * den);
}

inline MetricJet assemble_jet(const Jet2& g11, const Jet2& g12, const Jet2& g22) {
    MetricJet jet;
    jet.g = {g11.value(), g12.value(), g12.value(), g22.value()};
    jet.dg[0] = {g11.du(), g12.du(), g12.du(), g22.du()};
    jet.dg[1] = {g11.dv(), g12.dv(), g12.dv(), g22.dv()};
    jet.d2g[0] = {g11.duu(), g12.duu(), g12.duu(), g22.duu()};
    jet.d2g[1] = {g11.duv(), g12.duv(), g12.duv(), g22.duv()};
    jet.d2g[2] = {g11.dvv(), g12.dvv(), g12.dvv(), g22.dvv()};
    if (!(jet.g.trace() > 0.0) || !(jet.g.det() > 0.0))
        throw MetricError("metric is not positive definite at evaluation point");
    fill_christoffels(jet);
    jet.curvature = brioschi_curvature(jet);
    return jet;
}

// Finite-difference jet assembly for the Fermi-patched kind: central stencils
// at steps h and h/2 combined by one Richardson level.
inline MetricJet patched_jet(const PatchedMetricBase& patch, const SurfacePoint& p, double h) {
    auto gat = [&](double du, double dv) {
        return patch.eval_g({p.chart, p.coords.x + du, p.coords.y + dv});
    };
    const Mat2 g0 = gat(0.0, 0.0);
    struct Stencil {
        Mat2 du, dv, duu, duv, dvv;
    };
    auto level = [&](double s) {
        Stencil st;
        const Mat2 pu = gat(s, 0.0), mu = gat(-s, 0.0);
        const Mat2 pv = gat(0.0, s), mv = gat(0.0, -s);
        const Mat2 pp = gat(s, s), pm = gat(s, -s), mp = gat(-s, s), mm = gat(-s, -s);
        st.du = (pu - mu) * (0.5 / s);
        st.dv = (pv - mv) * (0.5 / s);
        st.duu = (pu - g0 * 2.0 + mu) * (1.0 / (s * s));
        st.dvv = (pv - g0 * 2.0 + mv) * (1.0 / (s * s));
        st.duv = (pp - pm - mp + mm) * (0.25 / (s * s));
        return st;
    };
    const Stencil c = level(h), f = level(0.5 * h);
    auto rich = [](const Mat2& coarse, const Mat2& fine) {
        return (fine * 4.0 - coarse) * (1.0 / 3.0);
    };
    MetricJet jet;
    jet.g = g0;
    jet.dg[0] = rich(c.du, f.du);
    jet.dg[1] = rich(c.dv, f.dv);
    jet.d2g[0] = rich(c.duu, f.duu);
    jet.d2g[1] = rich(c.duv, f.duv);
    jet.d2g[2] = rich(c.dvv, f.dvv);
    if (!(jet.g.trace() > 0.0) || !(jet.g.det() > 0.0))
        throw MetricError("patched metric is not positive definite at evaluation point");
    fill_christoffels(jet);
    jet.curvature = brioschi_curvature(jet);
    return jet;
}

}  // namespace metric_detail

// Step for the patched-kind finite differences; Richardson brings the
// truncation to O(h^4) while the pointwise evaluation noise stays ~1e-12.
inline constexpr double kPatchedFdStep = 1e-3;

inline MetricJet eval_metric(const MetricField& m, const SurfacePoint& p) {
    if (!in_chart_domain(p)) throw DomainError("eval_metric: point outside chart domain");
    if (m.kind() == MetricField::Kind::FermiPatched) {
        const auto& patch = *m.patch();
        if (!patch.near_patch(p)) return eval_metric(patch.base_metric(), p);
        return metric_detail::patched_jet(patch, p, kPatchedFdStep);
    }
    Jet2 g11, g12, g22;
    metric_detail::metric_component_jets(m, p, g11, g12, g22);
    return metric_detail::assemble_jet(g11, g12, g22);
}

// Norm and inner product of chart tangent vectors under g at p.
inline double metric_inner(const MetricJet& jet, const Vec2& a, const Vec2& b) {
    return a.x * (jet.g.a * b.x + jet.g.b * b.y) + a.y * (jet.g.c * b.x + jet.g.d * b.y);
}
inline double metric_norm(const MetricJet& jet, const Vec2& a) {
    return std::sqrt(metric_inner(jet, a, a));
}

// Rotation by +90 degrees in the metric g with the atlas orientation:
// (Jw)^i = eps^{ik} g_kj w^j / sqrt(det g).  Both charts carry the same
// orientation, so J is globally consistent.
inline Vec2 metric_rotate90(const MetricJet& jet, const Vec2& w) {
    const double s = 1.0 / std::sqrt(jet.g.det());
    const double w1 = jet.g.a * w.x + jet.g.b * w.y;  // g_1j w^j
    const double w2 = jet.g.c * w.x + jet.g.d * w.y;  // g_2j w^j
    return {-s * w2, s * w1};
}

// ---------------------------------------------------------------------------
// Curvature survey over a two-chart grid.
// ---------------------------------------------------------------------------

struct CurvatureSample {
    SurfacePoint point;
    double curvature;
};

struct CurvatureReport {
    double k_min = 0.0;
    double k_max = 0.0;
    bool convex = false;
    std::vector<CurvatureSample> samples;
};

inline CurvatureReport curvature_report(const MetricField& m, int grid_density,
                                        int workers = 1) {
    if (grid_density < 8)
        throw DomainError("curvature_report: grid density must be at least 8 per chart dimension");
    // Each chart scans the disk r <= 1.1; together the two disks cover the
    // sphere with overlap.
    const double R = 1.1;
    std::vector<SurfacePoint> pts;
    for (int chart = 0; chart < 2; ++chart)
        for (int i = 0; i < grid_density; ++i)
            for (int j = 0; j < grid_density; ++j) {
                const double u = -R + 2.0 * R * (i + 0.5) / grid_density;
                const double v = -R + 2.0 * R * (j + 0.5) / grid_density;
                if (u * u + v * v > R * R) continue;
                pts.push_back({static_cast<ChartId>(chart), u, v});
            }
    const std::vector<double> ks = parallel_map<double>(
        pts.size(), workers,
        [&](std::size_t i) { return eval_metric(m, pts[i]).curvature; });
    CurvatureReport rep;
    rep.k_min = ks[0];
    rep.k_max = ks[0];
    rep.samples.reserve(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        rep.k_min = std::min(rep.k_min, ks[i]);
        rep.k_max = std::max(rep.k_max, ks[i]);
        rep.samples.push_back({pts[i], ks[i]});
    }
    rep.convex = rep.k_min > 0.0;
    return rep;
}

}  // namespace geokit
