#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "geokit/metric.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Geodesic flow on the unit tangent bundle, integrated in chart coordinates
// with the two fundamental orthogonal Jacobi solutions carried along:
//
//   state y = (u, v, du, dv, f1, f1', f2, f2')
//
//   u''^i = -Gamma^i_jk u'^j u'^k          (geodesic equation)
//   f''   = -K(t) f                        (scalar Jacobi equation)
//
// f1 has initial data (1, 0), f2 has (0, 1); both are measured against the
// parallel normal N = J(direction).  The scalar Jacobi data is chart-free, so
// chart hand-off only rewrites (u, v, du, dv).
//
// Integrator: Dormand-Prince 5(4) with the classic quartic dense output;
// velocity renormalized to unit g-speed after every accepted step.
// ---------------------------------------------------------------------------

struct UnitTangentState {
    SurfacePoint point;
    Vec2 direction;
};

// Renormalize to unit g-speed; returns the defect |g(v,v) - 1| that was removed.
inline double renormalize(const MetricField& m, UnitTangentState& s) {
    const auto jet = eval_metric(m, s.point);
    const double n2 = metric_inner(jet, s.direction, s.direction);
    const double defect = std::abs(n2 - 1.0);
    s.direction = s.direction / std::sqrt(n2);
    return defect;
}

inline UnitTangentState make_unit_state(const MetricField& m, const SurfacePoint& p,
                                        const Vec2& dir) {
    UnitTangentState s{p, dir};
    renormalize(m, s);
    return s;
}

// Distance between two unit-tangent states: chordal distance of base points
// plus the direction mismatch compared through the fixed sphere embedding.
inline double state_distance(const UnitTangentState& a, const UnitTangentState& b) {
    const Vec3 pa = sphere_position(a.point), pb = sphere_position(b.point);
    const Vec3 va = sphere_tangent(a.point, a.direction);
    const Vec3 vb = sphere_tangent(b.point, b.direction);
    const double nva = va.norm(), nvb = vb.norm();
    return (pa - pb).norm() + (va * (1.0 / nva) - vb * (1.0 / nvb)).norm();
}

namespace flow_detail {

using Y8 = std::array<double, 8>;

inline Y8 axpy(const Y8& y, double a, const Y8& k) {
    Y8 r;
    for (int i = 0; i < 8; ++i) r[i] = y[i] + a * k[i];
    return r;
}

struct Rhs {
    const MetricField& m;
    ChartId chart;

    Y8 operator()(const Y8& y) const {
        const SurfacePoint p{chart, y[0], y[1]};
        const auto jet = eval_metric(m, p);
        const double du = y[2], dv = y[3];
        auto acc = [&](int i) {
            return -(jet.gamma(i, 0, 0) * du * du + 2.0 * jet.gamma(i, 0, 1) * du * dv +
                     jet.gamma(i, 1, 1) * dv * dv);
        };
        const double K = jet.curvature;
        return {du, dv, acc(0), acc(1), y[5], -K * y[4], y[7], -K * y[6]};
    }
};

}  // namespace flow_detail

// One accepted integrator step with its dense-output polynomial, all in a
// single chart.
struct ArcStep {
    double t0 = 0.0, t1 = 0.0;
    ChartId chart = ChartId::North;
    std::array<flow_detail::Y8, 5> rcont{};  // dense output coefficients

    flow_detail::Y8 eval(double t) const {
        const double th = (t - t0) / (t1 - t0);
        const double th1 = 1.0 - th;
        flow_detail::Y8 y;
        for (int i = 0; i < 8; ++i)
            y[i] = rcont[0][i] +
                   th * (rcont[1][i] + th1 * (rcont[2][i] + th * (rcont[3][i] + th1 * rcont[4][i])));
        return y;
    }
};

struct GeodesicArc {
    std::vector<ArcStep> steps;
    double t_end = 0.0;
    double tol = 0.0;
    double max_unit_defect = 0.0;  // sup |g(v,v) - 1| seen before renormalization
    UnitTangentState initial;
    UnitTangentState final;

    const ArcStep& step_at(double t) const {
        if (steps.empty()) throw NumericalError("GeodesicArc: empty arc");
        // Binary search over monotone step times.
        std::size_t lo = 0, hi = steps.size() - 1;
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (t <= steps[mid].t1)
                hi = mid;
            else
                lo = mid + 1;
        }
        return steps[lo];
    }

    UnitTangentState state_at(double t) const {
        const auto& st = step_at(t);
        const auto y = st.eval(t);
        return {{st.chart, y[0], y[1]}, {y[2], y[3]}};
    }

    // Fundamental Jacobi solutions at time t: (f1, f1', f2, f2').
    std::array<double, 4> jacobi_at(double t) const {
        const auto& st = step_at(t);
        const auto y = st.eval(t);
        return {y[4], y[5], y[6], y[7]};
    }

    // Monodromy-style matrix [[f1, f2], [f1', f2']] at t_end.
    Mat2 jacobi_matrix() const {
        if (steps.empty()) throw NumericalError("GeodesicArc: empty arc");
        const auto j = jacobi_at(t_end);
        return {j[0], j[2], j[1], j[3]};
    }
};

struct JacobiScalarState {
    double f = 0.0;
    double fdot = 0.0;
};

namespace flow_detail {

// Dormand-Prince 5(4) tableau.
inline constexpr double A21 = 1.0 / 5.0;
inline constexpr double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0;
inline constexpr double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0;
inline constexpr double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0,
                        A53 = 64448.0 / 6561.0, A54 = -212.0 / 729.0;
inline constexpr double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0, A63 = 46732.0 / 5247.0,
                        A64 = 49.0 / 176.0, A65 = -5103.0 / 18656.0;
inline constexpr double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0,
                        B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0;
inline constexpr double E1 = 71.0 / 57600.0, E3 = -71.0 / 16695.0, E4 = 71.0 / 1920.0,
                        E5 = -17253.0 / 339200.0, E6 = 22.0 / 525.0, E7 = -1.0 / 40.0;
// Dense output weights.
inline constexpr double D1 = -12715105075.0 / 11282082432.0;
inline constexpr double D3 = 87487479700.0 / 32700410799.0;
inline constexpr double D4 = -10690763975.0 / 1880347072.0;
inline constexpr double D5 = 701980252875.0 / 199316789632.0;
inline constexpr double D6 = -1453857185.0 / 822651844.0;
inline constexpr double D7 = 69997945.0 / 29380423.0;

struct StepResult {
    Y8 y1;
    ArcStep record;
    double error;  // scaled error estimate
};

// One trial step (no acceptance logic).  Throws DomainError if a stage point
// leaves the chart.
inline StepResult try_step(const Rhs& rhs, double t, const Y8& y, const Y8& k1, double h) {
    const Y8 k2 = rhs(axpy(y, h * A21, k1));
    Y8 s = y;
    for (int i = 0; i < 8; ++i) s[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
    const Y8 k3 = rhs(s);
    for (int i = 0; i < 8; ++i) s[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    const Y8 k4 = rhs(s);
    for (int i = 0; i < 8; ++i)
        s[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    const Y8 k5 = rhs(s);
    for (int i = 0; i < 8; ++i)
        s[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    const Y8 k6 = rhs(s);
    Y8 y1;
    for (int i = 0; i < 8; ++i)
        y1[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
    const Y8 k7 = rhs(y1);

    StepResult r;
    r.y1 = y1;
    double err2 = 0.0;
    for (int i = 0; i < 8; ++i) {
        const double e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] +
                              E7 * k7[i]);
        const double sc = 1.0 + std::max(std::abs(y[i]), std::abs(y1[i]));
        err2 += (e / sc) * (e / sc);
    }
    r.error = std::sqrt(err2 / 8.0);

    r.record.t0 = t;
    r.record.t1 = t + h;
    auto& rc = r.record.rcont;
    for (int i = 0; i < 8; ++i) {
        const double ydiff = y1[i] - y[i];
        const double bspl = h * k1[i] - ydiff;
        rc[0][i] = y[i];
        rc[1][i] = ydiff;
        rc[2][i] = bspl;
        rc[3][i] = ydiff - h * k7[i] - bspl;
        rc[4][i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] +
                        D7 * k7[i]);
    }
    return r;
}

}  // namespace flow_detail

// Visitor invoked after each accepted step; return false to stop integration.
using StepVisitor = std::function<bool(const ArcStep&, const UnitTangentState&)>;

struct FlowOptions {
    double tol = 1e-10;
    double max_time = std::numeric_limits<double>::infinity();
    std::size_t max_steps = 2'000'000;
    bool record_steps = true;  // fill GeodesicArc::steps
};

// Core integration loop.  Starts at s0 (renormalized), where visitor may stop
// the run early; otherwise runs to options.max_time.
inline GeodesicArc integrate_flow(const MetricField& m, const UnitTangentState& s0,
                                  const FlowOptions& options, const StepVisitor& visit = {}) {
    if (!(options.tol >= 1e-13 && options.tol <= 1e-5))
        throw DomainError("flow: tolerance must lie in [1e-13, 1e-5]");
    if (!(options.max_time > 0.0)) throw DomainError("flow: integration time must be positive");

    GeodesicArc arc;
    arc.tol = options.tol;
    UnitTangentState cur = s0;
    renormalize(m, cur);
    arc.initial = cur;

    // Jacobi fundamental system state.
    flow_detail::Y8 y{cur.point.coords.x, cur.point.coords.y, cur.direction.x, cur.direction.y,
                      1.0, 0.0, 0.0, 1.0};
    ChartId chart = cur.point.chart;
    double t = 0.0;
    double h = std::min(0.05, options.max_time * 0.25);

    flow_detail::Rhs rhs{m, chart};
    flow_detail::Y8 k1 = rhs(y);

    for (std::size_t n = 0; n < options.max_steps; ++n) {
        if (t >= options.max_time) break;
        h = std::min(h, options.max_time - t);

        flow_detail::StepResult step;
        bool ok = false;
        while (!ok) {
            try {
                step = flow_detail::try_step(rhs, t, y, k1, h);
                ok = step.error <= options.tol;
            } catch (const DomainError&) {
                step.error = 1e30;  // stage left the chart: treat as rejection
            }
            if (!ok) {
                h *= std::clamp(0.9 * std::pow(std::max(step.error / options.tol, 1e-10), -0.2),
                                0.1, 0.5);
                if (h < 1e-14 * std::max(1.0, std::abs(t)))
                    throw IntegrationError("flow: step size underflow", t);
            }
        }

        step.record.chart = chart;
        t = step.record.t1;
        y = step.y1;

        // Unit-speed renormalization; track the drift that was removed.
        {
            const auto jet = eval_metric(m, {chart, y[0], y[1]});
            const Vec2 vel{y[2], y[3]};
            const double n2 = metric_inner(jet, vel, vel);
            arc.max_unit_defect = std::max(arc.max_unit_defect, std::abs(n2 - 1.0));
            const double inv = 1.0 / std::sqrt(n2);
            y[2] *= inv;
            y[3] *= inv;
        }

        if (options.record_steps) arc.steps.push_back(step.record);
        arc.t_end = t;
        arc.final = {{chart, y[0], y[1]}, {y[2], y[3]}};

        if (visit && !visit(step.record, arc.final)) return arc;

        // Chart hand-off when drifting toward the chart boundary.
        if (Vec2{y[0], y[1]}.norm() > kChartSwitchRadius) {
            const SurfacePoint p{chart, y[0], y[1]};
            const SurfacePoint q = transition(p, other_chart(chart));
            const Vec2 w = transition_tangent(p, {y[2], y[3]});
            chart = q.chart;
            y[0] = q.coords.x;
            y[1] = q.coords.y;
            y[2] = w.x;
            y[3] = w.y;
            rhs.chart = chart;
            arc.final = {{chart, y[0], y[1]}, {y[2], y[3]}};
        }

        h *= std::clamp(0.9 * std::pow(std::max(step.error / options.tol, 1e-16), -0.2), 0.2, 5.0);
        k1 = rhs(y);
    }

    if (arc.t_end + 1e-12 < options.max_time && std::isfinite(options.max_time))
        throw IntegrationError("flow: exceeded maximum step count", arc.t_end);
    return arc;
}

// Geodesic flow to a fixed time.
inline GeodesicArc flow(const MetricField& m, const UnitTangentState& s0, double t_end,
                        double tol = 1e-10) {
    FlowOptions opt;
    opt.tol = tol;
    opt.max_time = t_end;
    return integrate_flow(m, s0, opt);
}

// Propagate an arbitrary orthogonal Jacobi initial condition along an arc by
// superposition of the co-integrated fundamental system.
inline JacobiScalarState jacobi_propagate(const GeodesicArc& arc, const JacobiScalarState& j0) {
    const auto j = arc.jacobi_at(arc.t_end);
    return {j0.f * j[0] + j0.fdot * j[2], j0.f * j[1] + j0.fdot * j[3]};
}

// Linearized return map of a closing arc on the orthogonal subbundle:
// [[f1(T), f2(T)], [f1'(T), f2'(T)]].  Requires closed endpoints.
inline Mat2 linearized_return(const GeodesicArc& arc, double closure_tol = 1e-8) {
    const double defect = state_distance(arc.initial, arc.final);
    if (defect > closure_tol)
        throw DomainError("linearized_return: arc endpoints do not close (defect " +
                          std::to_string(defect) + ")");
    return arc.jacobi_matrix();
}

}  // namespace geokit
