#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "geokit/closed.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Fermi coordinates along a closed geodesic and the trace-perturbation
// construction: a bump h added to the Jacobi solution f1 on a window
// (T - 2eps, T - eps) prescribes a curvature change
//
//   k(t) = Khat - K = -(h'' + K h) / (f1 + h)
//
// realized by the metric change, written in Fermi coordinates (t, s),
//
//   ghat_11(t, s) = g_11(t, s) - k(t) b(s) s^2,   ghat_12 = 0, ghat_22 = 1.
//
// In chart coordinates this is evaluated in difference form,
//
//   ghat = g - k(t) b(s) s^2 * (grad t)(grad t)^T,
//
// where grad t is the first row of (D Phi)^{-1} for the Fermi map
// Phi(t, s) = exp_{gamma(t)}(s N(t)).  The correction vanishes with all
// derivatives at the patch boundary, so evaluation is bit-exact equal to the
// base metric outside and has no seam for the finite-difference jets inside.
// D Phi is available in closed form from the flow: dPhi/ds is the geodesic
// direction and dPhi/dt = -f1n(s) J(direction) with f1n the scalar Jacobi
// solution along the normal geodesic with data (1, 0).
// ---------------------------------------------------------------------------

// Smooth standard bump on (-1, 1) with B(0) = 1, all derivatives vanishing
// at the boundary.
inline double bump_value(double x) {
    const double q = 1.0 - x * x;
    if (q <= 1e-300 || std::abs(x) >= 1.0) return 0.0;
    return std::exp(1.0 - 1.0 / q);
}
inline double bump_d1(double x) {
    const double q = 1.0 - x * x;
    if (q <= 1e-10 || std::abs(x) >= 1.0) return 0.0;
    const double w1 = -2.0 * x / (q * q);
    return bump_value(x) * w1;
}
inline double bump_d2(double x) {
    const double q = 1.0 - x * x;
    if (q <= 1e-10 || std::abs(x) >= 1.0) return 0.0;
    const double w1 = -2.0 * x / (q * q);
    const double w2 = (-2.0 - 6.0 * x * x) / (q * q * q);
    return bump_value(x) * (w1 * w1 + w2);
}

struct BumpProfile {
    double t_lo = 0.0, t_hi = 0.0;  // support of h: (T - 2 eps, T - eps)
    double epsilon = 0.0;
    double amplitude = 0.0;
    double c2_norm = 0.0;  // max over |h|, |h'|, |h''| on the support

    double h(double t) const {
        if (amplitude == 0.0 || t <= t_lo || t >= t_hi) return 0.0;
        return amplitude * bump_value(2.0 * (t - t_lo) / (t_hi - t_lo) - 1.0);
    }
    double dh(double t) const {
        if (amplitude == 0.0 || t <= t_lo || t >= t_hi) return 0.0;
        const double w = t_hi - t_lo;
        return amplitude * bump_d1(2.0 * (t - t_lo) / w - 1.0) * 2.0 / w;
    }
    double d2h(double t) const {
        if (amplitude == 0.0 || t <= t_lo || t >= t_hi) return 0.0;
        const double w = t_hi - t_lo;
        return amplitude * bump_d2(2.0 * (t - t_lo) / w - 1.0) * 4.0 / (w * w);
    }
};

// Bump profile per the construction: support exactly (T - 2 eps, T - eps),
// peak value = amplitude at the midpoint.
inline BumpProfile design_bump(const ClosedGeodesic& gamma, double epsilon, double amplitude) {
    const double T = gamma.period;
    if (!(epsilon > 0.0 && 2.0 * epsilon < T))
        throw DomainError("design_bump: need 0 < 2*epsilon < period");
    BumpProfile b;
    b.epsilon = epsilon;
    b.amplitude = amplitude;
    b.t_lo = T - 2.0 * epsilon;
    b.t_hi = T - epsilon;
    double m = 0.0;
    for (int i = 0; i <= 400; ++i) {
        const double t = b.t_lo + (b.t_hi - b.t_lo) * i / 400.0;
        m = std::max({m, std::abs(b.h(t)), std::abs(b.dh(t)), std::abs(b.d2h(t))});
    }
    b.c2_norm = m;
    return b;
}

// ---------------------------------------------------------------------------
// Fermi frame machinery.
// ---------------------------------------------------------------------------

namespace fermi_detail {

// Fixed-step RK4 on the geodesic+Jacobi system.  Fixed stepping keeps the
// numerical map a smooth function of its inputs, which the finite-difference
// jets of the patched metric rely on.
struct NormalFlowResult {
    SurfacePoint point;
    Vec2 direction;  // unit geodesic direction at the endpoint
    double f1 = 1.0; // scalar Jacobi value with data (1, 0)
    double f1d = 0.0;
};

inline NormalFlowResult normal_flow(const MetricField& m, const SurfacePoint& p0,
                                    const Vec2& dir0, double s, double hstep) {
    flow_detail::Y8 y{p0.coords.x, p0.coords.y, dir0.x, dir0.y, 1.0, 0.0, 0.0, 1.0};
    ChartId chart = p0.chart;
    const double len = std::abs(s);
    NormalFlowResult out{p0, dir0, 1.0, 0.0};
    if (len < 1e-300) return out;
    if (s < 0.0) {
        y[2] = -y[2];
        y[3] = -y[3];
    }
    const int n = std::max(2, static_cast<int>(std::ceil(len / hstep)));
    const double h = len / n;
    flow_detail::Rhs rhs{m, chart};
    for (int i = 0; i < n; ++i) {
        const auto k1 = rhs(y);
        const auto k2 = rhs(flow_detail::axpy(y, 0.5 * h, k1));
        const auto k3 = rhs(flow_detail::axpy(y, 0.5 * h, k2));
        const auto k4 = rhs(flow_detail::axpy(y, h, k3));
        for (int c = 0; c < 8; ++c)
            y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        if (Vec2{y[0], y[1]}.norm() > kChartSwitchRadius) {
            const SurfacePoint cp{chart, y[0], y[1]};
            const SurfacePoint q = transition(cp, other_chart(chart));
            const Vec2 w = transition_tangent(cp, {y[2], y[3]});
            chart = q.chart;
            y[0] = q.coords.x;
            y[1] = q.coords.y;
            y[2] = w.x;
            y[3] = w.y;
            rhs.chart = chart;
        }
    }
    out.point = {chart, y[0], y[1]};
    out.direction = {y[2], y[3]};
    if (s < 0.0) out.direction = -1.0 * out.direction;
    out.f1 = y[4];
    out.f1d = y[5];
    return out;
}

// Foot data of gamma over the padded window, resampled at fixed step into a
// single chart so the interpolation is smooth (the adaptive arc's dense
// output has per-step seams at the integration tolerance, which finite
// differences would amplify).
struct FootTable {
    double t0 = 0.0, t1 = 0.0;
    ChartId chart = ChartId::North;
    int n = 0;
    double h = 0.0;
    // position, velocity, acceleration per knot
    std::vector<Vec2> pos, vel, acc;

    bool contains(double t) const { return t >= t0 && t <= t1; }

    void eval(double t, Vec2& p, Vec2& v) const {
        const double x = std::clamp((t - t0) / h, 0.0, static_cast<double>(n - 1) - 1e-12);
        const int i = std::min(static_cast<int>(x), n - 2);
        const double u = x - i;
        // Quintic Hermite for position.
        const double u2 = u * u, u3 = u2 * u, u4 = u3 * u, u5 = u4 * u;
        const double H0 = 1.0 - 10.0 * u3 + 15.0 * u4 - 6.0 * u5;
        const double H1 = u - 6.0 * u3 + 8.0 * u4 - 3.0 * u5;
        const double H2 = 0.5 * u2 - 1.5 * u3 + 1.5 * u4 - 0.5 * u5;
        const double G0 = 10.0 * u3 - 15.0 * u4 + 6.0 * u5;
        const double G1 = -4.0 * u3 + 7.0 * u4 - 3.0 * u5;
        const double G2 = 0.5 * u3 - u4 + 0.5 * u5;
        p = pos[i] * H0 + vel[i] * (h * H1) + acc[i] * (h * h * H2) + pos[i + 1] * G0 +
            vel[i + 1] * (h * G1) + acc[i + 1] * (h * h * G2);
        // Cubic Hermite for velocity (vel, acc as its derivative).
        const double c0 = 1.0 - 3.0 * u2 + 2.0 * u3;
        const double c1 = u - 2.0 * u2 + u3;
        const double d0 = 3.0 * u2 - 2.0 * u3;
        const double d1 = -u2 + u3;
        v = vel[i] * c0 + acc[i] * (h * c1) + vel[i + 1] * d0 + acc[i + 1] * (h * d1);
    }
};

inline Vec2 geodesic_acceleration(const MetricField& m, const SurfacePoint& p, const Vec2& v) {
    const auto jet = eval_metric(m, p);
    auto acc = [&](int i) {
        return -(jet.gamma(i, 0, 0) * v.x * v.x + 2.0 * jet.gamma(i, 0, 1) * v.x * v.y +
                 jet.gamma(i, 1, 1) * v.y * v.y);
    };
    return {acc(0), acc(1)};
}

inline FootTable build_foot_table(const MetricField& m, const ClosedGeodesic& gamma,
                                  double t0, double t1, int knots) {
    FootTable ft;
    ft.t0 = t0;
    ft.t1 = t1;
    ft.n = knots;
    ft.h = (t1 - t0) / (knots - 1);

    // Chart of the window midpoint hosts the whole table.
    const auto mid = gamma.arc.state_at(wrap_periodic(0.5 * (t0 + t1), gamma.period));
    ft.chart = mid.point.chart;

    // Re-integrate from t0 at fixed step for seam-free samples.
    auto st = gamma.arc.state_at(wrap_periodic(t0, gamma.period));
    if (st.point.chart != ft.chart) {
        const Vec2 w = transition_tangent(st.point, st.direction);
        st = {transition(st.point, ft.chart), w};
    }
    flow_detail::Y8 y{st.point.coords.x, st.point.coords.y, st.direction.x, st.direction.y,
                      1.0, 0.0, 0.0, 1.0};
    const flow_detail::Rhs rhs{m, ft.chart};
    const int sub = 4;  // integration substeps per knot interval
    const double h = ft.h / sub;
    ft.pos.resize(knots);
    ft.vel.resize(knots);
    ft.acc.resize(knots);
    for (int i = 0; i < knots; ++i) {
        const SurfacePoint p{ft.chart, y[0], y[1]};
        if (!in_chart_domain(p))
            throw DomainError("fermi window leaves the chart; re-base the geodesic");
        ft.pos[i] = {y[0], y[1]};
        ft.vel[i] = {y[2], y[3]};
        ft.acc[i] = geodesic_acceleration(m, p, ft.vel[i]);
        if (i + 1 == knots) break;
        for (int k = 0; k < sub; ++k) {
            const auto k1 = rhs(y);
            const auto k2 = rhs(flow_detail::axpy(y, 0.5 * h, k1));
            const auto k3 = rhs(flow_detail::axpy(y, 0.5 * h, k2));
            const auto k4 = rhs(flow_detail::axpy(y, h, k3));
            for (int c = 0; c < 8; ++c)
                y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
    }
    return ft;
}

}  // namespace fermi_detail

// Fermi coordinate patch along a window of a closed geodesic.
class FermiPatchData {
public:
    MetricField base;
    ClosedGeodesic gamma;
    double t_lo = 0.0, t_hi = 0.0;  // support window (T - 2 eps, T - eps)
    double epsilon = 0.0;
    double s_max = 0.0;
    double pad = 0.0;  // extension of the inversion range beyond the support
    fermi_detail::FootTable foot;
    double normal_step = 0.015;  // fixed step of the normal-geodesic flow

    // Chordal prefilter data.
    std::vector<Vec3> window_pts;
    double chordal_margin = 0.0;

    struct Frame {
        SurfacePoint point;  // Phi(t, s)
        Vec2 d_ds;           // geodesic direction (column dPhi/ds)
        Vec2 d_dt;           // Jacobi column dPhi/dt = -f1n J(d_ds)
    };

    void foot_state(double t, SurfacePoint& p, Vec2& v, Vec2& normal) const {
        Vec2 pos, vel;
        foot.eval(t, pos, vel);
        p = {foot.chart, pos};
        const auto jet = eval_metric(base, p);
        const double n2 = metric_inner(jet, vel, vel);
        v = vel / std::sqrt(n2);
        normal = metric_rotate90(jet, v);
    }

    Frame forward(double t, double s) const {
        SurfacePoint p;
        Vec2 v, N;
        foot_state(t, p, v, N);
        const auto r = fermi_detail::normal_flow(base, p, N, s, normal_step);
        Frame fr;
        fr.point = r.point;
        fr.d_ds = r.direction;
        const auto jet = eval_metric(base, r.point);
        fr.d_dt = -r.f1 * metric_rotate90(jet, r.direction);
        return fr;
    }

    // Scalar Jacobi data along the normal geodesic (used by the curvature
    // checks: g_11(t, s) = f1n(s)^2 in Fermi coordinates).
    double f1n(double t, double s) const {
        SurfacePoint p;
        Vec2 v, N;
        foot_state(t, p, v, N);
        return fermi_detail::normal_flow(base, p, N, s, normal_step).f1;
    }

    struct Inverse {
        double t = 0.0, s = 0.0;
        Vec2 grad_t;  // first row of (D Phi)^{-1} in the chart of the query
        bool inside = false;
    };

    // Invert the Fermi map near the patch.  Returns inside = false when the
    // point resolves outside the padded window or the normal extent.
    Inverse invert(const SurfacePoint& query) const {
        // Seed by projecting onto the foot polyline chordally.
        const Vec3 P = sphere_position(query);
        double t = foot.t0;
        double best = 1e300;
        const int scan = 64;
        for (int i = 0; i <= scan; ++i) {
            const double tc = foot.t0 + (foot.t1 - foot.t0) * i / scan;
            Vec2 pos, vel;
            foot.eval(tc, pos, vel);
            const double d = (sphere_position({foot.chart, pos}) - P).norm();
            if (d < best) {
                best = d;
                t = tc;
            }
        }
        // Signed-offset seed via the chordal normal.
        double s;
        {
            SurfacePoint p;
            Vec2 v, N;
            foot_state(t, p, v, N);
            Vec3 n3 = sphere_tangent(p, N);
            const double scale = n3.norm();
            s = dot(P - sphere_position(p), n3) / (scale * scale);
        }

        Inverse inv;
        for (int it = 0; it < 40; ++it) {
            const Frame fr = forward(t, s);
            Vec2 fp = fr.point.coords;
            Vec2 cds = fr.d_ds, cdt = fr.d_dt;
            if (fr.point.chart != query.chart) {
                if (fr.point.coords.norm2() <
                    kChartOverlapInner * kChartOverlapInner)
                    return inv;  // far off the patch, resolved near a pole
                const auto q = transition(fr.point, query.chart);
                cds = transition_tangent(fr.point, cds);
                cdt = transition_tangent(fr.point, cdt);
                fp = q.coords;
            }
            const Vec2 r = fp - query.coords;
            const Mat2 J{cdt.x, cds.x, cdt.y, cds.y};
            const Vec2 delta = solve2(J, r);
            t -= delta.x;
            s -= delta.y;
            if (!(t > foot.t0 - 0.5 && t < foot.t1 + 0.5 && std::abs(s) < 3.0 * s_max + 0.5))
                return inv;  // diverging: not in the patch zone
            if (delta.norm() < 1e-12) {
                inv.t = t;
                inv.s = s;
                const Mat2 Ainv = J.inverse();
                inv.grad_t = {Ainv.a, Ainv.b};
                inv.inside = (t > t_lo - pad && t < t_hi + pad && std::abs(s) < s_max);
                return inv;
            }
        }
        throw NumericalError("fermi inverse did not converge");
    }

    bool near_patch_point(const SurfacePoint& p) const {
        const Vec3 P = sphere_position(p);
        double best = 1e300;
        for (const auto& w : window_pts) best = std::min(best, (w - P).norm());
        return best < chordal_margin;
    }
};

struct FermiPatch {
    std::shared_ptr<const FermiPatchData> data;

    double t_lo() const { return data->t_lo; }
    double t_hi() const { return data->t_hi; }
    double epsilon() const { return data->epsilon; }
    double s_max() const { return data->s_max; }
};

struct FermiFrameChecks {
    double g11_on_axis = 0.0;   // max |g11(t,0) - 1|
    double g12 = 0.0;           // max |g12(t,s)|
    double g22 = 0.0;           // max |g22(t,s) - 1|
    double dg11_on_axis = 0.0;  // max |d/ds g11(t,0)|
    double d2g11 = 0.0;         // max |d2/ds2 g11(t,0) + 2 K(t)|
};

// Independent verification of the Fermi normal form: the pullback metric
// (D Phi)^T g (D Phi) with D Phi by central finite differences.
inline FermiFrameChecks verify_fermi_frame(const FermiPatch& patch, int t_samples = 8) {
    const auto& d = *patch.data;
    FermiFrameChecks out;
    const double hd = 1e-4;
    auto pullback = [&](double t, double s) -> Mat2 {
        auto at = [&](double tt, double ss) {
            const auto fr = d.forward(tt, ss);
            return sphere_position(fr.point);
        };
        // Chart-free differencing via the embedding, then metric transfer:
        // assemble D Phi columns in the chart of the center point instead.
        const auto c = d.forward(t, s);
        auto chart_of = [&](double tt, double ss) {
            auto fr = d.forward(tt, ss);
            if (fr.point.chart != c.point.chart) {
                const auto q = transition(fr.point, c.point.chart);
                return q.coords;
            }
            return fr.point.coords;
        };
        (void)at;
        const Vec2 dt = (chart_of(t + hd, s) - chart_of(t - hd, s)) / (2.0 * hd);
        const Vec2 ds = (chart_of(t, s + hd) - chart_of(t, s - hd)) / (2.0 * hd);
        const auto jet = eval_metric(d.base, c.point);
        return {metric_inner(jet, dt, dt), metric_inner(jet, dt, ds),
                metric_inner(jet, ds, dt), metric_inner(jet, ds, ds)};
    };
    for (int i = 0; i < t_samples; ++i) {
        const double t = d.t_lo + (d.t_hi - d.t_lo) * (i + 0.5) / t_samples;
        const Mat2 g0 = pullback(t, 0.0);
        out.g11_on_axis = std::max(out.g11_on_axis, std::abs(g0.a - 1.0));
        for (double s : {-0.7 * d.s_max, 0.3 * d.s_max, 0.8 * d.s_max}) {
            const Mat2 gs = pullback(t, s);
            out.g12 = std::max(out.g12, std::abs(gs.b));
            out.g22 = std::max(out.g22, std::abs(gs.d - 1.0));
        }
        // d/ds g11(t, 0) and d2/ds2 g11(t, 0) from the Jacobi identity
        // g11 = f1n(s)^2, five-point stencils on the integrated values.
        const double hs = 5e-3;
        double f[5];
        for (int k = -2; k <= 2; ++k) f[k + 2] = d.f1n(t, k * hs);
        auto sq = [](double x) { return x * x; };
        const double d1 =
            (sq(f[0]) - 8.0 * sq(f[1]) + 8.0 * sq(f[3]) - sq(f[4])) / (12.0 * hs);
        const double d2 =
            (-sq(f[0]) + 16.0 * sq(f[1]) - 30.0 * sq(f[2]) + 16.0 * sq(f[3]) - sq(f[4])) /
            (12.0 * hs * hs);
        SurfacePoint p;
        Vec2 v, N;
        d.foot_state(t, p, v, N);
        const double K = eval_metric(d.base, p).curvature;
        out.dg11_on_axis = std::max(out.dg11_on_axis, std::abs(d1));
        out.d2g11 = std::max(out.d2g11, std::abs(d2 + 2.0 * K));
    }
    return out;
}

// Build the Fermi frame over the window (t_lo, t_hi) with normal extent
// s_max.  Checks the window against self-approaches of gamma and the focal
// bound, and verifies the normal form numerically.
inline FermiPatch fermi_frame(const MetricField& m, const ClosedGeodesic& gamma, double t_lo,
                              double t_hi, double s_max, double epsilon = 0.0) {
    if (!(t_hi > t_lo) || t_lo < 0.0 || t_hi > gamma.period)
        throw DomainError("fermi_frame: invalid window");

    auto data = std::make_shared<FermiPatchData>();
    data->base = m;
    data->gamma = gamma;
    data->t_lo = t_lo;
    data->t_hi = t_hi;
    data->epsilon = epsilon > 0.0 ? epsilon : (t_hi - t_lo);
    data->s_max = s_max;
    data->pad = std::min(0.25 * (t_hi - t_lo), 0.1);

    // Focal bound from the curvature along the window.
    double k_max = 0.0;
    const int nscan = 64;
    for (int i = 0; i <= nscan; ++i) {
        const double t = wrap_periodic(t_lo + (t_hi - t_lo) * i / nscan, gamma.period);
        const auto st = gamma.arc.state_at(t);
        k_max = std::max(k_max, eval_metric(m, st.point).curvature);
    }
    if (k_max > 0.0 && s_max > 0.5 * kPi / std::sqrt(k_max))
        throw DomainError("fermi_frame: normal extent exceeds the focal bound");

    // Window strands: the rest of gamma must stay out of the tube.  Points
    // within `buffer` of the window along the curve are the window's own
    // continuation, not another strand, and are excluded from the clearance.
    {
        const double buffer = 3.0 * data->pad + 3.0 * s_max;
        std::vector<Vec3> win, rest;
        const int ng = 512;
        for (int i = 0; i < ng; ++i) {
            const double t = gamma.period * i / ng;
            const auto st = gamma.arc.state_at(t);
            const Vec3 P = sphere_position(st.point);
            const double gap_lo = wrap_symmetric(t - t_lo, gamma.period);
            const double gap_hi = wrap_symmetric(t - t_hi, gamma.period);
            if (t >= t_lo && t <= t_hi)
                win.push_back(P);
            else if (std::abs(gap_lo) > buffer && std::abs(gap_hi) > buffer)
                rest.push_back(P);
        }
        double clearance = 1e300;
        for (const auto& a : win)
            for (const auto& b : rest) clearance = std::min(clearance, (a - b).norm());
        // Chordal lengths underestimate metric lengths by a bounded factor;
        // 2.5 covers every metric shipped here.
        if (clearance < 2.5 * s_max)
            throw NotSimpleError("fermi_frame: another strand of gamma enters the patch");
    }

    const double trange_lo = t_lo - data->pad - 0.02;
    const double trange_hi = t_hi + data->pad + 0.02;
    data->foot = fermi_detail::build_foot_table(m, gamma, trange_lo, trange_hi, 1024);

    // Chordal prefilter polyline and margin.
    double max_normal_scale = 0.0;
    for (int i = 0; i <= 32; ++i) {
        const double t = trange_lo + (trange_hi - trange_lo) * i / 32.0;
        SurfacePoint p;
        Vec2 v, N;
        data->foot_state(t, p, v, N);
        data->window_pts.push_back(sphere_position(p));
        max_normal_scale = std::max(max_normal_scale, sphere_tangent(p, N).norm());
    }
    data->chordal_margin = 1.4 * s_max * max_normal_scale + 0.05;

    FermiPatch patch{data};

    // Light normal-form self-check.
    const auto checks = verify_fermi_frame(patch, 4);
    if (checks.g11_on_axis > 1e-6 || checks.g12 > 1e-6 || checks.g22 > 1e-6 ||
        checks.dg11_on_axis > 1e-6)
        throw NumericalError("fermi_frame: normal form violated beyond tolerance");
    return patch;
}

// ---------------------------------------------------------------------------
// Perturbation records and the patched metric.
// ---------------------------------------------------------------------------

struct PerturbationRecord {
    FermiPatch patch;
    BumpProfile bump;
    double f1_at_T = 0.0;
    double f1d_at_T = 0.0;
    double predicted_delta_trace = 0.0;

    // K along gamma from the base metric at window parameter t.
    double base_curvature(double t) const {
        const auto st = patch.data->gamma.arc.state_at(
            wrap_periodic(t, patch.data->gamma.period));
        return eval_metric(patch.data->base, st.point).curvature;
    }
    double f1(double t) const {
        return patch.data->gamma.arc.jacobi_at(
            std::clamp(t, 0.0, patch.data->gamma.arc.t_end))[0];
    }
    // Designed curvature change k(t) = -(h'' + K h)/(f1 + h).
    double k(double t) const {
        const double ht = bump.h(t);
        if (ht == 0.0 && bump.d2h(t) == 0.0) return 0.0;
        return -(bump.d2h(t) + base_curvature(t) * ht) / (f1(t) + ht);
    }
};

// The predicted trace change of the construction:
//   dTr = f1'(T) * Int_{supp h} (1/(f1+h)^2 - 1/f1^2) dt.
inline double predicted_trace_delta(const PerturbationRecord& rec) {
    const auto& gamma = rec.patch.data->gamma;
    const double T = gamma.period;
    const auto jT = gamma.arc.jacobi_at(gamma.arc.t_end);
    if (std::abs(jT[0]) < 1e-9 || std::abs(jT[1]) < 1e-9)
        throw MainCaseViolationError(
            "predicted_trace_delta: f1(T) f1'(T) = 0; the two-step construction is not "
            "supported");
    // f1 and f1 + h must stay away from zero on the support.
    for (int i = 0; i <= 200; ++i) {
        const double t = rec.bump.t_lo + (rec.bump.t_hi - rec.bump.t_lo) * i / 200.0;
        const double f = rec.f1(t);
        if (f <= 0.0)
            throw FormulaInapplicableError(
                "predicted_trace_delta: f1 is not positive on the bump support");
        if (f + rec.bump.h(t) <= 1e-9)
            throw FormulaInapplicableError("predicted_trace_delta: f1 + h vanishes on support");
    }
    if (rec.bump.amplitude == 0.0) return 0.0;
    const double integral = integrate_adaptive(
        [&](double t) {
            const double f = rec.f1(t);
            const double fh = f + rec.bump.h(t);
            return 1.0 / (fh * fh) - 1.0 / (f * f);
        },
        rec.bump.t_lo, rec.bump.t_hi, 1e-9);
    return jT[1] * integral;
}

inline PerturbationRecord make_perturbation_record(const FermiPatch& patch,
                                                   const BumpProfile& bump) {
    PerturbationRecord rec{patch, bump, 0.0, 0.0, 0.0};
    const auto& gamma = patch.data->gamma;
    const auto jT = gamma.arc.jacobi_at(gamma.arc.t_end);
    rec.f1_at_T = jT[0];
    rec.f1d_at_T = jT[1];

    if (std::abs(rec.f1_at_T) < 1e-9 || std::abs(rec.f1d_at_T) < 1e-9)
        throw MainCaseViolationError(
            "make_perturbation_record: f1(T) f1'(T) = 0; two-step case refused");
    // Admissibility: f1 > 0 on the support so f1 + h (h >= 0) cannot vanish.
    for (int i = 0; i <= 200; ++i) {
        const double t = bump.t_lo + (bump.t_hi - bump.t_lo) * i / 200.0;
        if (rec.f1(t) + bump.h(t) <= 1e-9)
            throw DomainError("make_perturbation_record: f1 + h vanishes on the support "
                              "(amplitude too large or window inadmissible)");
        if (rec.f1(t) <= 0.0)
            throw DomainError(
                "make_perturbation_record: window lies outside the f1 > 0 stretch");
    }
    rec.predicted_delta_trace = predicted_trace_delta(rec);
    return rec;
}

namespace fermi_detail {

class PatchedMetric final : public PatchedMetricBase {
public:
    PatchedMetric(MetricField base, PerturbationRecord rec)
        : base_(std::move(base)), rec_(std::move(rec)) {}

    const MetricField& base_metric() const override { return base_; }

    bool near_patch(const SurfacePoint& p) const override {
        return rec_.patch.data->near_patch_point(p);
    }

    Mat2 eval_g(const SurfacePoint& p) const override {
        const Mat2 g = eval_metric(base_, p).g;
        if (!rec_.patch.data->near_patch_point(p)) return g;
        const auto inv = rec_.patch.data->invert(p);
        if (!inv.inside) return g;
        const double kb = rec_.k(inv.t) * bump_value(inv.s / rec_.patch.data->s_max) *
                          inv.s * inv.s;
        if (kb == 0.0) return g;
        // ghat = g - k b s^2 (grad t)(grad t)^T in chart coordinates.
        const Vec2 r = inv.grad_t;
        return {g.a - kb * r.x * r.x, g.b - kb * r.x * r.y, g.c - kb * r.y * r.x,
                g.d - kb * r.y * r.y};
    }

    const PerturbationRecord& record() const { return rec_; }

private:
    MetricField base_;
    PerturbationRecord rec_;
};

}  // namespace fermi_detail

// Apply the record: a fermi_patched MetricField equal to the base outside
// the patch and carrying the designed g11 change inside.
inline MetricField apply_perturbation(const MetricField& m, const PerturbationRecord& rec) {
    auto patched = std::make_shared<fermi_detail::PatchedMetric>(m, rec);
    MetricField out = MetricField::fermi_patched(patched);
    // Positivity scan over the patched zone.
    for (int i = 0; i <= 12; ++i)
        for (int j = 0; j <= 8; ++j) {
            const double t = rec.bump.t_lo + (rec.bump.t_hi - rec.bump.t_lo) * i / 12.0;
            const double s = -rec.patch.data->s_max +
                             2.0 * rec.patch.data->s_max * j / 8.0;
            const auto fr = rec.patch.data->forward(t, s);
            const Mat2 g = patched->eval_g(fr.point);
            if (!(g.trace() > 0.0 && g.det() > 0.0))
                throw MetricError("apply_perturbation: amplitude too large, metric loses "
                                  "positivity on the patch");
        }
    return out;
}

struct PerturbationReport {
    double measured_delta_trace = 0.0;
    double predicted_delta_trace = 0.0;
    double relative_discrepancy = 0.0;
    double period_change = 0.0;
    double geodesic_residual = 0.0;   // max residual of gamma under ghat
    double curvature_deviation = 0.0; // max |Khat - (K + k)| along gamma
    double trace_before = 0.0;
    double trace_after = 0.0;
};

// End-to-end verification: gamma persists under ghat, the curvature along it
// equals K + k, and the measured trace change matches the prediction.
inline PerturbationReport verify_perturbation(const MetricField& m,
                                              const PerturbationRecord& rec,
                                              double flow_tol = 1e-11) {
    const auto& gamma = rec.patch.data->gamma;
    const MetricField ghat = apply_perturbation(m, rec);

    PerturbationReport rep;
    rep.predicted_delta_trace = rec.predicted_delta_trace;
    rep.trace_before = gamma.monodromy.trace();

    // Geodesic residual of the stored orbit under the new metric, and the
    // curvature design check, sampled along the window.
    for (int i = 0; i <= 64; ++i) {
        const double t = rec.bump.t_lo + (rec.bump.t_hi - rec.bump.t_lo) * i / 64.0;
        const auto st = gamma.arc.state_at(t);
        const auto jet_hat = eval_metric(ghat, st.point);
        const auto jet_base = eval_metric(m, st.point);
        auto gamma_term = [&](const MetricJet& jet, int k) {
            return jet.gamma(k, 0, 0) * st.direction.x * st.direction.x +
                   2.0 * jet.gamma(k, 0, 1) * st.direction.x * st.direction.y +
                   jet.gamma(k, 1, 1) * st.direction.y * st.direction.y;
        };
        const Vec2 dres{gamma_term(jet_hat, 0) - gamma_term(jet_base, 0),
                        gamma_term(jet_hat, 1) - gamma_term(jet_base, 1)};
        rep.geodesic_residual = std::max(rep.geodesic_residual, dres.norm());
        rep.curvature_deviation =
            std::max(rep.curvature_deviation,
                     std::abs(jet_hat.curvature - (jet_base.curvature + rec.k(t))));
    }

    // Re-refine gamma under the new metric and measure the trace.
    RefineOptions opt;
    opt.flow_tol = flow_tol;
    const auto ghat_gamma = refine_closed(ghat, gamma.init, gamma.period, opt);
    rep.period_change = std::abs(ghat_gamma.period - gamma.period);
    if (state_distance(ghat_gamma.init, gamma.init) > 1e-6)
        throw NumericalError("verify_perturbation: gamma drifted under the new metric");
    rep.trace_after = ghat_gamma.monodromy.trace();
    rep.measured_delta_trace = rep.trace_after - rep.trace_before;
    rep.relative_discrepancy =
        rec.predicted_delta_trace == 0.0
            ? std::abs(rep.measured_delta_trace)
            : std::abs(rep.measured_delta_trace - rec.predicted_delta_trace) /
                  std::abs(rec.predicted_delta_trace);
    return rep;
}

// Scan basepoints of gamma until the structural window (T - 2e, T - e) lies
// in an f1 > 0 stretch with f1(T) != 0 and f1'(T) != 0.
inline ClosedGeodesic choose_admissible_basepoint(const MetricField& m,
                                                  const ClosedGeodesic& gamma, double epsilon,
                                                  int candidates = 24,
                                                  const RefineOptions& opt = {}) {
    for (int i = 0; i < candidates; ++i) {
        const double t0 = gamma.period * i / candidates;
        ClosedGeodesic g;
        try {
            g = rebase_closed(m, gamma, t0, opt);
        } catch (const NumericalError&) {
            continue;
        }
        const double T = g.period;
        const auto jT = g.arc.jacobi_at(g.arc.t_end);
        if (std::abs(jT[0]) < 1e-3 || std::abs(jT[1]) < 1e-3) continue;
        bool positive = true;
        for (int k = 0; k <= 64 && positive; ++k) {
            const double t = (T - 2.0 * epsilon) + epsilon * k / 64.0;
            positive = g.arc.jacobi_at(std::clamp(t, 0.0, g.arc.t_end))[0] > 1e-3;
        }
        if (positive) return g;
    }
    throw DomainError("choose_admissible_basepoint: no admissible window found");
}

}  // namespace geokit
