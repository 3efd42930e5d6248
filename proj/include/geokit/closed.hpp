#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "geokit/flow.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Closed geodesics: Birkhoff midpoint shortening to produce seeds, Newton
// shooting on a flow transversal to converge them, and the trace machinery
// (classification, rotation numbers, the f1-integral trace formula).
// ---------------------------------------------------------------------------

struct DiophantineReport {
    bool passed = false;
    double rho = 0.0, c = 0.0, tau = 0.0;
    long q_max = 0;
    long violation_n = 0, violation_m = 0;  // first violating rational, if any
    double violation_gap = 0.0, violation_bound = 0.0;
};

// Finite Diophantine check: |rho - m/n| >= c / n^(2+tau) for all n <= Q.
// A finite surrogate for the Diophantine property, not a proof.
inline DiophantineReport check_diophantine(double rho, double c, double tau, long Q) {
    if (Q < 2) throw DomainError("check_diophantine: Q must be at least 2");
    DiophantineReport rep;
    rep.rho = rho;
    rep.c = c;
    rep.tau = tau;
    rep.q_max = Q;
    rep.passed = true;
    for (long n = 1; n <= Q; ++n) {
        const double bound = c / std::pow(static_cast<double>(n), 2.0 + tau);
        // Only the two nearest numerators can violate.
        const long m0 = static_cast<long>(std::floor(rho * n));
        for (long m = std::max<long>(0, m0); m <= std::min(n, m0 + 1); ++m) {
            const double gap = std::abs(rho - static_cast<double>(m) / n);
            if (gap < bound) {
                rep.passed = false;
                rep.violation_n = n;
                rep.violation_m = m;
                rep.violation_gap = gap;
                rep.violation_bound = bound;
                return rep;
            }
        }
    }
    return rep;
}

enum class StabilityType { Hyperbolic, Elliptic, Parabolic };

inline const char* stability_name(StabilityType t) {
    switch (t) {
        case StabilityType::Hyperbolic: return "hyperbolic";
        case StabilityType::Elliptic: return "elliptic";
        default: return "parabolic";
    }
}

// Half-width of the trace band treated as parabolic around |Tr| = 2.
inline constexpr double kParabolicBand = 1e-6;

struct Classification {
    StabilityType tag = StabilityType::Parabolic;
    double trace = 2.0;
    double lambda = 1.0;  // expanding eigenvalue (hyperbolic only), |lambda| > 1
    double rho = 0.0;     // rotation number in (0,1) (elliptic only)
    std::optional<DiophantineReport> diophantine_report;
};

// Classify a unimodular monodromy matrix.  The rotation-number branch uses
// the sign of the lower-left entry, an invariant of det-positive conjugacy
// in the Jacobi frame ((1,0) and (0,1) normal directions).
inline Classification classify_monodromy(const Mat2& M) {
    Classification cl;
    cl.trace = M.trace();
    const double tr = cl.trace;
    if (std::abs(std::abs(tr) - 2.0) < kParabolicBand) {
        cl.tag = StabilityType::Parabolic;
    } else if (std::abs(tr) > 2.0) {
        cl.tag = StabilityType::Hyperbolic;
        const double s = tr >= 0.0 ? 1.0 : -1.0;
        cl.lambda = s * 0.5 * (std::abs(tr) + std::sqrt(tr * tr - 4.0));
    } else {
        cl.tag = StabilityType::Elliptic;
        double rho = std::acos(0.5 * tr) / kTwoPi;  // in (0, 1/2)
        if (M.c < 0.0) rho = 1.0 - rho;
        cl.rho = rho;
    }
    return cl;
}

struct ClosedGeodesic {
    UnitTangentState init;
    double period = 0.0;
    Mat2 monodromy = Mat2::identity();
    Classification classification;
    double closure_defect = 0.0;
    GeodesicArc arc;  // the closing arc with co-integrated Jacobi data
};

// Trace of the k-th iterate via the Chebyshev-type recurrence
// Tr(M^{k+1}) = Tr(M) Tr(M^k) - Tr(M^{k-1}).
inline double trace_power(const Mat2& monodromy, int k) {
    if (k < 1) throw DomainError("trace_power: k must be >= 1");
    const double tr = monodromy.trace();
    double prev = 2.0, cur = tr;
    for (int i = 1; i < k; ++i) {
        const double next = tr * cur - prev;
        prev = cur;
        cur = next;
    }
    return cur;
}

inline double trace_powers(const ClosedGeodesic& gamma, int k) {
    return trace_power(gamma.monodromy, k);
}

// ---------------------------------------------------------------------------
// Two-point geodesic subproblem for nearby points: Newton shooting over
// (heading angle, length).  Used by the midpoint shortening sweeps.
// ---------------------------------------------------------------------------

struct ShootingEdge {
    double heading = 0.0;  // angle against the g-orthonormal frame at the tail
    double length = 0.0;
};

namespace closed_detail {

inline void orthonormal_frame(const MetricJet& jet, Vec2& e1, Vec2& e2) {
    e1 = Vec2{1.0, 0.0} / metric_norm(jet, {1.0, 0.0});
    e2 = metric_rotate90(jet, e1);
}

inline UnitTangentState heading_state(const MetricField& m, const SurfacePoint& p,
                                      double heading) {
    const auto jet = eval_metric(m, p);
    Vec2 e1, e2;
    orthonormal_frame(jet, e1, e2);
    return {p, e1 * std::cos(heading) + e2 * std::sin(heading)};
}

}  // namespace closed_detail

// Solve exp-style shooting from p to q.  Both points must be close enough
// that the chart line from p to q seeds Newton (edge lengths well under the
// injectivity scale; this is what the loop spacing invariant guarantees).
inline ShootingEdge geodesic_between(const MetricField& m, const SurfacePoint& p,
                                     const SurfacePoint& q, double flow_tol = 1e-10,
                                     const ShootingEdge* warm_start = nullptr) {
    const SurfacePoint q_local = (q.chart == p.chart) ? q : transition(q, p.chart);
    const auto jet = eval_metric(m, p);
    Vec2 e1, e2;
    closed_detail::orthonormal_frame(jet, e1, e2);

    ShootingEdge edge;
    if (warm_start && warm_start->length > 0.0) {
        edge = *warm_start;
    } else {
        const Vec2 d = q_local.coords - p.coords;
        // Frame components of the chart displacement.
        const double c1 = metric_inner(jet, d, e1), c2 = metric_inner(jet, d, e2);
        edge.heading = std::atan2(c2, c1);
        edge.length = metric_norm(jet, d);
    }
    // Near-coincident points: the chart line is the geodesic to rounding
    // accuracy and the finite-difference Jacobian would drown in noise.
    if (edge.length < 1e-5) return edge;

    FlowOptions opt;
    opt.tol = flow_tol;
    opt.record_steps = false;

    auto endpoint = [&](double heading, double length) {
        opt.max_time = length;
        auto s = integrate_flow(m, closed_detail::heading_state(m, p, heading), opt).final;
        if (s.point.chart != p.chart) s.point = transition(s.point, p.chart);
        return s.point.coords - q_local.coords;
    };

    // The endpoint responds to a heading change at scale O(length), so the
    // differencing steps must sit well above the integration noise.
    const double target = std::max(20.0 * flow_tol, 1e-11);
    double last_residual = std::numeric_limits<double>::infinity();

    auto newton = [&](ShootingEdge e) -> std::optional<ShootingEdge> {
        const double dh = 1e-4, dl = std::max(1e-6, 1e-4 * e.length);
        Vec2 r = endpoint(e.heading, e.length);
        double rn = r.norm();
        for (int iter = 0; iter < 25; ++iter) {
            last_residual = rn;
            if (rn < target) return e;
            const Vec2 rh = endpoint(e.heading + dh, e.length);
            const Vec2 rl = endpoint(e.heading, e.length + dl);
            const Mat2 J{(rh.x - r.x) / dh, (rl.x - r.x) / dl, (rh.y - r.y) / dh,
                         (rl.y - r.y) / dl};
            const Vec2 delta = solve2(J, -1.0 * r);
            // Damped update: halve until the residual actually drops.
            double step = 1.0;
            bool improved = false;
            for (int ls = 0; ls < 6 && !improved; ++ls, step *= 0.5) {
                ShootingEdge trial{e.heading + step * delta.x,
                                   std::abs(e.length + step * delta.y)};
                const Vec2 rt = endpoint(trial.heading, trial.length);
                if (rt.norm() < rn) {
                    e = trial;
                    r = rt;
                    rn = rt.norm();
                    improved = true;
                }
            }
            if (!improved) return std::nullopt;  // stalled
        }
        return std::nullopt;
    };

    if (auto solved = newton(edge)) return *solved;
    if (warm_start) {
        // Retry from the untainted chart-line seed.
        const Vec2 d = q_local.coords - p.coords;
        const double c1 = metric_inner(jet, d, e1), c2 = metric_inner(jet, d, e2);
        ShootingEdge fresh{std::atan2(c2, c1), metric_norm(jet, d)};
        if (auto solved = newton(fresh)) return *solved;
    }
    throw NoConvergenceError("geodesic_between: shooting did not converge", last_residual);
}

inline SurfacePoint geodesic_midpoint(const MetricField& m, const SurfacePoint& p,
                                      const SurfacePoint& q, double flow_tol = 1e-10,
                                      ShootingEdge* warm = nullptr) {
    ShootingEdge edge = geodesic_between(m, p, q, flow_tol, warm);
    if (warm) *warm = edge;
    if (edge.length < 1e-14) return p;
    FlowOptions opt;
    opt.tol = flow_tol;
    opt.record_steps = false;
    opt.max_time = 0.5 * edge.length;
    return integrate_flow(m, closed_detail::heading_state(m, p, edge.heading), opt)
        .final.point;
}

// ---------------------------------------------------------------------------
// Loop curves and Birkhoff midpoint shortening.
// ---------------------------------------------------------------------------

struct LoopCurve {
    std::vector<SurfacePoint> vertices;  // cyclic
    double length = 0.0;
    bool collapsed = false;
};

struct ShortenOptions {
    int max_sweeps = 200;
    double length_tol = 1e-8;      // stop when a sweep shortens less than this
    double flow_tol = 1e-9;        // tolerance of the shooting subproblems
    double collapse_length = 1e-2; // loops shorter than this count as collapsed
};

inline double loop_length(const MetricField& m, const std::vector<SurfacePoint>& vs,
                          double flow_tol = 1e-9) {
    double total = 0.0;
    for (std::size_t i = 0; i < vs.size(); ++i)
        total += geodesic_between(m, vs[i], vs[(i + 1) % vs.size()], flow_tol).length;
    return total;
}

inline LoopCurve shorten_loop(const MetricField& m, const LoopCurve& loop0,
                              const ShortenOptions& options = {}) {
    if (loop0.vertices.size() < 4)
        throw DomainError("shorten_loop: need at least 4 vertices");

    // Spacing precondition against a coarse curvature survey.
    const auto coarse = curvature_report(m, 8);
    const double spacing_cap = 0.5 * kPi / std::sqrt(std::max(coarse.k_max, 1e-12));

    std::vector<SurfacePoint> vs = loop0.vertices;
    const std::size_t n = vs.size();
    std::vector<ShootingEdge> warm(n);

    double length = loop_length(m, vs, options.flow_tol);
    if (length <= 0.0) throw DomainError("shorten_loop: degenerate zero-length loop");
    for (std::size_t i = 0; i < n; ++i) {
        const double li =
            geodesic_between(m, vs[i], vs[(i + 1) % n], options.flow_tol).length;
        if (li > spacing_cap)
            throw DomainError("shorten_loop: vertex spacing exceeds the injectivity scale");
    }

    LoopCurve out;
    for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
        // Alternate parity: replace x_i by the geodesic midpoint of its
        // neighbours.  Alternation keeps each replacement independent, which
        // is what makes every sweep non-increasing in length.
        for (int parity = 0; parity < 2; ++parity)
            for (std::size_t i = parity; i < n; i += 2)
                vs[i] = geodesic_midpoint(m, vs[(i + n - 1) % n], vs[(i + 1) % n],
                                          options.flow_tol, &warm[i]);

        const double new_length = loop_length(m, vs, options.flow_tol);
        const bool tiny = new_length < options.collapse_length;
        const bool settled = length - new_length < options.length_tol;
        length = new_length;
        if (tiny) {
            out.collapsed = true;
            break;
        }
        if (settled) break;
    }

    out.vertices = std::move(vs);
    out.length = length;
    if (length < options.collapse_length) out.collapsed = true;
    return out;
}

// ---------------------------------------------------------------------------
// Newton shooting for closed geodesics on a flow transversal.
// ---------------------------------------------------------------------------

namespace closed_detail {

struct Section {
    const MetricField& m;
    UnitTangentState base;  // (x0, v0)
    MetricJet jet;          // metric at x0
    Vec2 normal;            // N0 = J v0

    explicit Section(const MetricField& metric, const UnitTangentState& s)
        : m(metric), base(s), jet(eval_metric(metric, s.point)),
          normal(metric_rotate90(eval_metric(metric, s.point), s.direction)) {}

    static Vec2 gamma_bilinear(const MetricJet& j, const Vec2& x, const Vec2& y) {
        return {j.gamma(0, 0, 0) * x.x * y.x + j.gamma(0, 0, 1) * (x.x * y.y + x.y * y.x) +
                    j.gamma(0, 1, 1) * x.y * y.y,
                j.gamma(1, 0, 0) * x.x * y.x + j.gamma(1, 0, 1) * (x.x * y.y + x.y * y.x) +
                    j.gamma(1, 1, 1) * x.y * y.y};
    }

    // Lift section coordinates z = (xi, eta) to a unit tangent state.
    UnitTangentState lift(const Vec2& z) const {
        const Vec2 dx = normal * z.x;
        const Vec2 dv = normal * z.y - gamma_bilinear(jet, dx, base.direction);
        UnitTangentState s{{base.point.chart, base.point.coords + dx}, base.direction + dv};
        renormalize(m, s);
        return s;
    }

    // Section coordinates of a state near the base point.
    Vec2 project(UnitTangentState s) const {
        if (s.point.chart != base.point.chart) {
            const auto q = transition(s.point, base.point.chart);
            s.direction = transition_tangent(s.point, s.direction);
            s.point = q;
        }
        const Vec2 dx = s.point.coords - base.point.coords;
        const Vec2 dv = (s.direction - base.direction) + gamma_bilinear(jet, dx, base.direction);
        return {metric_inner(jet, dx, normal), metric_inner(jet, dv, normal)};
    }
};

struct SectionCrossing {
    double time = 0.0;
    UnitTangentState state;
    Mat2 jacobi = Mat2::identity();
    bool found = false;
};

// First crossing of the section plane near the expected period: the event
// function is the sphere-embedding plane <P(t) - X0, V0> with a proximity
// and direction filter to skip far-side crossings.
inline SectionCrossing find_section_return(const MetricField& m, const Section& sec,
                                           const UnitTangentState& start, double period_guess,
                                           double tol) {
    const Vec3 X0 = sphere_position(sec.base.point);
    Vec3 V0 = sphere_tangent(sec.base.point, sec.base.direction);
    V0 = V0 * (1.0 / V0.norm());

    auto h_of = [&](const SurfacePoint& p) { return dot(sphere_position(p) - X0, V0); };
    auto admissible = [&](const UnitTangentState& s) {
        if ((sphere_position(s.point) - X0).norm() > 0.8) return false;
        Vec3 V = sphere_tangent(s.point, s.direction);
        return dot(V, V0) / V.norm() > 0.3;
    };

    SectionCrossing best;
    const double t_lo = 0.4 * period_guess, t_hi = 1.6 * period_guess;

    double prev_t = 0.0;
    double prev_h = h_of(start.point);
    FlowOptions opt;
    opt.tol = tol;
    opt.max_time = t_hi;
    GeodesicArc arc = integrate_flow(m, start, opt, [&](const ArcStep& st, const UnitTangentState& end) {
        const double h1 = h_of(end.point);
        if (st.t1 > t_lo && prev_h < 0.0 && h1 >= 0.0 && admissible(end)) {
            // Bisect the dense output for the root.
            double a = std::max(prev_t, st.t0), b = st.t1;
            // The sign change may have happened in this step only.
            auto h_at = [&](double t) {
                const auto y = st.eval(t);
                return dot(sphere_position({st.chart, y[0], y[1]}) - X0, V0);
            };
            double ha = h_at(a);
            if (ha > 0.0) {  // crossing was at a previous step boundary; accept t = a
                b = a;
            }
            for (int it = 0; it < 200 && b - a > 1e-13 * std::max(1.0, b); ++it) {
                const double mid = 0.5 * (a + b);
                if (h_at(mid) < 0.0)
                    a = mid;
                else
                    b = mid;
            }
            const double t_star = 0.5 * (a + b);
            const auto y = st.eval(t_star);
            best.time = t_star;
            best.state = {{st.chart, y[0], y[1]}, {y[2], y[3]}};
            best.jacobi = {y[4], y[6], y[5], y[7]};
            best.found = true;
            return false;  // stop integration
        }
        prev_t = st.t1;
        prev_h = h1;
        return true;
    });
    (void)arc;
    return best;
}

}  // namespace closed_detail

struct RefineOptions {
    double flow_tol = 1e-11;
    double newton_tol = 1e-10;  // on the section displacement
    int max_newton = 50;
};

// Newton shooting from a seed state with an approximate period.  The section
// is frozen at the seed; displacement is measured in the Jacobi frame where
// the co-integrated monodromy is the exact linearization.
inline ClosedGeodesic refine_closed(const MetricField& m, const UnitTangentState& seed,
                                    double period_guess, const RefineOptions& options = {}) {
    UnitTangentState base = seed;
    renormalize(m, base);
    closed_detail::Section sec(m, base);

    Vec2 z{0.0, 0.0};
    double period = period_guess;
    double residual = std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < options.max_newton; ++iter) {
        const auto start = sec.lift(z);
        const auto crossing =
            closed_detail::find_section_return(m, sec, start, period, options.flow_tol);
        if (!crossing.found)
            throw NoConvergenceError("refine_closed: no section return found", residual);

        const Vec2 r = sec.project(crossing.state) - z;
        residual = r.norm();
        period = crossing.time;
        if (residual < options.newton_tol) break;
        if (iter + 1 == options.max_newton)
            throw NoConvergenceError("refine_closed: Newton did not converge", residual);

        const Mat2 A = crossing.jacobi - Mat2::identity();
        Vec2 delta;
        if (std::abs(A.det()) > 1e-10) {
            delta = solve2(A, -1.0 * r);
        } else {
            // Near-parabolic linearization: ridge-regularized least squares.
            const Mat2 At = A.transpose();
            const Mat2 AtA = At * A + Mat2::identity() * 1e-9;
            const Vec2 Atr = At * (-1.0 * r);
            delta = solve2(AtA, Atr);
        }
        // Damp oversized steps: the basin assumption is a displacement < 0.1.
        const double dn = delta.norm();
        if (dn > 0.05) delta = delta * (0.05 / dn);
        z += delta;
    }

    // Final clean pass from the converged initial condition.
    ClosedGeodesic out;
    out.init = sec.lift(z);
    out.arc = flow(m, out.init, period, options.flow_tol);
    out.period = period;
    out.closure_defect = state_distance(out.arc.initial, out.arc.final);
    out.monodromy = out.arc.jacobi_matrix();
    out.classification = classify_monodromy(out.monodromy);
    return out;
}

inline ClosedGeodesic refine_closed(const MetricField& m, const LoopCurve& loop,
                                    const RefineOptions& options = {}) {
    if (loop.collapsed) throw DomainError("refine_closed: collapsed loop has no geodesic");
    if (loop.vertices.size() < 2) throw DomainError("refine_closed: loop too coarse");
    const auto& p0 = loop.vertices[0];
    const auto edge = geodesic_between(m, p0, loop.vertices[1], options.flow_tol);
    const auto seed = closed_detail::heading_state(m, p0, edge.heading);
    return refine_closed(m, seed, loop.length, options);
}

// Re-anchor a closed geodesic at arc time t0 along itself.
inline ClosedGeodesic rebase_closed(const MetricField& m, const ClosedGeodesic& gamma,
                                    double t0, const RefineOptions& options = {}) {
    const auto s = gamma.arc.state_at(wrap_periodic(t0, gamma.period));
    return refine_closed(m, s, gamma.period, options);
}

// ---------------------------------------------------------------------------
// Trace via the f1 integral formula:
//   Tr = f1(T) + 1/f1(T) + f1'(T) * Int_0^T ds / f1(s)^2,
// valid while f1 keeps a fixed sign on [0, T].
// ---------------------------------------------------------------------------

inline double trace_via_f1(const ClosedGeodesic& gamma) {
    const auto& arc = gamma.arc;
    if (arc.steps.empty()) throw DomainError("trace_via_f1: geodesic has no stored arc");

    // Sign monitoring on a dense sample of every step.
    double min_abs = std::numeric_limits<double>::infinity();
    for (const auto& st : arc.steps) {
        for (int k = 0; k <= 8; ++k) {
            const double t = st.t0 + (st.t1 - st.t0) * k / 8.0;
            const double f1 = st.eval(t)[4];
            if (f1 <= 0.0)
                throw FormulaInapplicableError(
                    "trace_via_f1: f1 vanishes on [0, T]; fall back to the monodromy trace");
            min_abs = std::min(min_abs, std::abs(f1));
        }
    }
    if (min_abs < 1e-8)
        throw FormulaInapplicableError("trace_via_f1: f1 too close to zero for the integral");

    const auto jT = arc.jacobi_at(arc.t_end);
    const double f1T = jT[0], f1dT = jT[1];
    const double integral = integrate_adaptive(
        [&](double s) {
            const double f1 = arc.jacobi_at(std::clamp(s, 0.0, arc.t_end))[0];
            return 1.0 / (f1 * f1);
        },
        0.0, arc.t_end, 1e-10);
    return f1T + 1.0 / f1T + f1dT * integral;
}

}  // namespace geokit
