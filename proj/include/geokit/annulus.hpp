#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "geokit/closed.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Birkhoff annulus over a simple closed geodesic gamma: states (t, theta)
// with t arclength along gamma mod L and theta in (0, pi) the angle from
// gamma-dot to the outgoing direction, measured toward N = J(gamma-dot).
// D_+ is by convention the side N points into.
//
// The return map integrates the flow to the next crossing of gamma that
// enters D_+ (the second geometric crossing: the first one exits into D_-).
// Its Jacobian comes from the co-integrated Jacobi fundamental system pushed
// through the annulus frames:
//
//   DF = [ sin(th)/sin(th') * f1 ,  -f2/sin(th') ]
//        [ -sin(th) * f1'        ,   f2'         ]
//
// so the weighted determinant sin(th') det DF / sin(th) equals the Wronskian
// f1 f2' - f1' f2 = 1: area preservation of omega = sin(theta) dt ^ dtheta in
// its testable form.
// ---------------------------------------------------------------------------

struct AnnulusState {
    double t = 0.0;
    double theta = 0.0;
};

struct AnnulusReturn {
    AnnulusState image;
    double return_time = 0.0;
    Mat2 jacobian = Mat2::identity();
};

struct AnnulusOptions {
    double theta_min = 1e-3;      // guard band: states with theta in (theta_min, pi - theta_min)
    double flow_tol = 1e-11;
    double return_cap = 0.0;      // absolute time cap; 0 = 12 * L
    double simple_separation = 1e-4;  // chordal separation demanded between strands
};

class AnnulusContext {
public:
    MetricField metric;
    ClosedGeodesic gamma;
    double length = 0.0;
    AnnulusOptions options;

    // Dense reference samples of gamma for the arclength projection.
    struct Sample {
        Vec3 pos, tan, nrm;  // sphere-embedding position, unit tangent, unit left normal
    };
    std::vector<Sample> table;

    double t_wrap(double t) const { return wrap_periodic(t, length); }

    UnitTangentState gamma_state(double t) const { return gamma.arc.state_at(t_wrap(t)); }

    // Lift (t, theta) to the unit tangent bundle.
    UnitTangentState lift(const AnnulusState& s) const {
        const auto gs = gamma_state(s.t);
        const auto jet = eval_metric(metric, gs.point);
        const Vec2 N = metric_rotate90(jet, gs.direction);
        UnitTangentState out{gs.point,
                             gs.direction * std::cos(s.theta) + N * std::sin(s.theta)};
        renormalize(metric, out);
        return out;
    }

    // Arclength projection onto gamma via the sphere embedding; returns the
    // foot parameter and the signed normal offset (positive on the D_+ side).
    struct Projection {
        double t = 0.0;
        double sigma = 0.0;
    };

    Projection project(const Vec3& P, std::optional<double> warm_t = {}) const {
        double t;
        if (warm_t) {
            t = t_wrap(*warm_t);
        } else {
            std::size_t best = 0;
            double bd = 1e300;
            for (std::size_t i = 0; i < table.size(); ++i) {
                const double d = (table[i].pos - P).norm();
                if (d < bd) {
                    bd = d;
                    best = i;
                }
            }
            t = length * static_cast<double>(best) / static_cast<double>(table.size());
        }
        // Newton on psi(t) = <P - gamma(t), tangent(t)>.
        for (int it = 0; it < 30; ++it) {
            const auto gs = gamma_state(t);
            const Vec3 G = sphere_position(gs.point);
            Vec3 Tg = sphere_tangent(gs.point, gs.direction);
            const double tn = Tg.norm();
            Tg = Tg * (1.0 / tn);
            const Vec3 d = P - G;
            const double psi = dot(d, Tg);
            // d psi / dt ~ -|dgamma3/dt| near the curve.
            const double step = std::clamp(psi / tn, -0.125 * length, 0.125 * length);
            t = t_wrap(t + step);
            if (std::abs(psi) < 1e-13) break;
        }
        const auto gs = gamma_state(t);
        const auto jet = eval_metric(metric, gs.point);
        const Vec2 N2 = metric_rotate90(jet, gs.direction);
        Vec3 N3 = sphere_tangent(gs.point, N2);
        N3 = N3 * (1.0 / N3.norm());
        return {t, dot(P - sphere_position(gs.point), N3)};
    }
};

// Simplicity check on a sampled polyline: non-neighbouring samples must stay
// chordally separated.  Exposed for direct testing with synthetic curves.
inline bool polyline_is_simple(const std::vector<Vec3>& pts, double min_separation) {
    const std::size_t n = pts.size();
    if (n < 8) return true;
    // Neighbourhood to skip scales with the local spacing.
    double spacing = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        spacing = std::max(spacing, (pts[(i + 1) % n] - pts[i]).norm());
    const std::size_t skip = std::max<std::size_t>(2, static_cast<std::size_t>(
        std::ceil(3.0 * min_separation / std::max(spacing, 1e-12))));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + skip; j < n; ++j) {
            if (i == 0 && j + skip > n) continue;  // cyclic neighbourhood
            if ((pts[i] - pts[j]).norm() < min_separation) return false;
        }
    return true;
}

inline AnnulusContext build_annulus(const MetricField& m, const ClosedGeodesic& gamma,
                                    const AnnulusOptions& options = {}) {
    if (gamma.closure_defect > 1e-6)
        throw DomainError("build_annulus: geodesic is not closed to tolerance");

    AnnulusContext ctx;
    ctx.metric = m;
    ctx.gamma = gamma;
    ctx.length = gamma.period;
    ctx.options = options;
    if (ctx.options.return_cap <= 0.0) ctx.options.return_cap = 12.0 * ctx.length;

    const int n = 1024;
    ctx.table.resize(n);
    std::vector<Vec3> pts(n);
    for (int i = 0; i < n; ++i) {
        const double t = ctx.length * i / n;
        const auto gs = gamma.arc.state_at(t);
        const auto jet = eval_metric(m, gs.point);
        const Vec2 N2 = metric_rotate90(jet, gs.direction);
        AnnulusContext::Sample smp;
        smp.pos = sphere_position(gs.point);
        smp.tan = sphere_tangent(gs.point, gs.direction);
        smp.tan = smp.tan * (1.0 / smp.tan.norm());
        smp.nrm = sphere_tangent(gs.point, N2);
        smp.nrm = smp.nrm * (1.0 / smp.nrm.norm());
        ctx.table[i] = smp;
        pts[i] = smp.pos;
    }
    if (!polyline_is_simple(pts, options.simple_separation))
        throw NotSimpleError("build_annulus: geodesic has a self-intersection");
    return ctx;
}

namespace annulus_detail {

struct Crossing {
    double time = 0.0;
    UnitTangentState state;
    Mat2 jacobi = Mat2::identity();
    double foot_t = 0.0;
    bool found = false;
};

// Find the first crossing of gamma in the requested direction (+1: entering
// D_+, -1: entering D_-) along the flow from `start`.
inline Crossing first_crossing(const AnnulusContext& ctx, const UnitTangentState& start,
                               int direction, double time_cap, double flow_tol) {
    Crossing out;
    double warm_t = ctx.project(sphere_position(start.point)).t;
    double prev_time = 0.0;
    double prev_sigma = 0.0;  // starts on gamma
    bool have_prev = false;

    FlowOptions opt;
    opt.tol = flow_tol;
    opt.max_time = time_cap;
    opt.record_steps = true;

    integrate_flow(ctx.metric, start, opt, [&](const ArcStep& st, const UnitTangentState&) {
        const int sub = 8;
        for (int k = 1; k <= sub; ++k) {
            const double tk = st.t0 + (st.t1 - st.t0) * k / sub;
            const auto y = st.eval(tk);
            const auto proj = ctx.project(sphere_position({st.chart, y[0], y[1]}), warm_t);
            warm_t = proj.t;
            const double sk = proj.sigma;
            if (have_prev) {
                const bool crosses = direction > 0 ? (prev_sigma < 0.0 && sk >= 0.0)
                                                   : (prev_sigma > 0.0 && sk <= 0.0);
                // Genuine crossings pass through the tube around gamma; a sign
                // flip with both offsets large is a projection artifact.
                if (crosses && std::min(std::abs(prev_sigma), std::abs(sk)) < 0.2) {
                    double a = prev_time, b = tk;
                    double wt = warm_t;
                    for (int bis = 0; bis < 60 && b - a > 1e-12; ++bis) {
                        const double mid = 0.5 * (a + b);
                        const auto ym = st.eval(std::max(mid, st.t0));
                        const auto pm =
                            ctx.project(sphere_position({st.chart, ym[0], ym[1]}), wt);
                        wt = pm.t;
                        const double sm = pm.sigma;
                        if ((direction > 0) ? (sm < 0.0) : (sm > 0.0))
                            a = mid;
                        else
                            b = mid;
                    }
                    const double tstar = 0.5 * (a + b);
                    const auto ys = st.eval(std::max(tstar, st.t0));
                    out.time = tstar;
                    out.state = {{st.chart, ys[0], ys[1]}, {ys[2], ys[3]}};
                    out.jacobi = {ys[4], ys[6], ys[5], ys[7]};
                    out.foot_t = ctx.project(sphere_position(out.state.point), wt).t;
                    out.found = true;
                    return false;
                }
            }
            prev_sigma = sk;
            prev_time = tk;
            have_prev = true;
        }
        return true;
    });
    return out;
}

// Angle of direction w against gamma at foot parameter t, both measured at
// the point of `at` (w in the chart of `at`).
inline double angle_against_gamma(const AnnulusContext& ctx, double foot_t,
                                  const UnitTangentState& at) {
    auto gs = ctx.gamma_state(foot_t);
    Vec2 gdir = gs.direction;
    if (gs.point.chart != at.point.chart)
        gdir = transition_tangent(gs.point, gs.direction);
    const auto jet = eval_metric(ctx.metric, at.point);
    const Vec2 N = metric_rotate90(jet, gdir);
    const double c = metric_inner(jet, at.direction, gdir);
    const double s = metric_inner(jet, at.direction, N);
    return std::atan2(s, c);
}

}  // namespace annulus_detail

// One application of the Birkhoff return map with its Jacobian.
inline AnnulusReturn return_map(const AnnulusContext& ctx, const AnnulusState& s) {
    const auto& o = ctx.options;
    if (!(s.theta > o.theta_min && s.theta < kPi - o.theta_min))
        throw DomainError("return_map: state outside the theta guard band");

    const auto start = ctx.lift(s);
    const auto cross = annulus_detail::first_crossing(ctx, start, +1, o.return_cap, o.flow_tol);
    if (!cross.found)
        throw NoReturnError("return_map: no return before the time cap");

    const double theta1 = annulus_detail::angle_against_gamma(ctx, cross.foot_t, cross.state);
    if (!(theta1 > o.theta_min && theta1 < kPi - o.theta_min))
        throw GrazingError("return_map: near-tangential crossing");

    AnnulusReturn ret;
    ret.image = {ctx.t_wrap(cross.foot_t), theta1};
    ret.return_time = cross.time;

    const double s0 = std::sin(s.theta), s1 = std::sin(theta1);
    const Mat2& M = cross.jacobi;  // [[f1, f2], [f1', f2']]
    ret.jacobian = {s0 / s1 * M.a, -M.b / s1, -s0 * M.c, M.d};
    return ret;
}

// Inverse return map via time reversal: flow the reversed state to its first
// crossing into D_-, then reverse again.
inline AnnulusReturn return_map_backward(const AnnulusContext& ctx, const AnnulusState& s) {
    const auto& o = ctx.options;
    if (!(s.theta > o.theta_min && s.theta < kPi - o.theta_min))
        throw DomainError("return_map_backward: state outside the theta guard band");

    const auto fwd = ctx.lift(s);
    const UnitTangentState rev{fwd.point, -fwd.direction};
    const auto cross = annulus_detail::first_crossing(ctx, rev, -1, o.return_cap, o.flow_tol);
    if (!cross.found)
        throw NoReturnError("return_map_backward: no return before the time cap");

    const UnitTangentState back{cross.state.point, -cross.state.direction};
    const double theta1 = annulus_detail::angle_against_gamma(ctx, cross.foot_t, back);
    if (!(theta1 > o.theta_min && theta1 < kPi - o.theta_min))
        throw GrazingError("return_map_backward: near-tangential crossing");

    AnnulusReturn ret;
    ret.image = {ctx.t_wrap(cross.foot_t), theta1};
    ret.return_time = cross.time;
    // Jacobian of F^{-1} at s equals the inverse of DF at the preimage.
    ret.jacobian = return_map(ctx, ret.image).jacobian.inverse();
    return ret;
}

// n-fold return with chained Jacobian.
inline AnnulusReturn return_map_power(const AnnulusContext& ctx, AnnulusState s, int n) {
    if (n < 1) throw DomainError("return_map_power: n must be >= 1");
    AnnulusReturn acc = return_map(ctx, s);
    for (int k = 1; k < n; ++k) {
        const auto step = return_map(ctx, acc.image);
        acc.jacobian = step.jacobian * acc.jacobian;
        acc.return_time += step.return_time;
        acc.image = step.image;
    }
    return acc;
}

// Annulus displacement d(F^n(s), s) respecting the t-period.
inline double annulus_displacement(const AnnulusContext& ctx, const AnnulusState& a,
                                   const AnnulusState& b) {
    const double dt = wrap_symmetric(a.t - b.t, ctx.length);
    return std::hypot(dt, a.theta - b.theta);
}

// ---------------------------------------------------------------------------
// Periodic points of F^n.
// ---------------------------------------------------------------------------

struct PeriodicPoint {
    AnnulusState state;
    int n = 1;               // iterate the point is fixed under
    int minimal_period = 1;  // m | n
    double trace_n = 0.0;    // trace of D F^n
    bool degenerate = false; // |trace_n - 2| < 1e-6
    double residual = 0.0;   // |F^n(state) - state|
};

struct PeriodicScan {
    bool degenerate_annulus = false;  // the whole grid is fixed (round sphere)
    std::vector<PeriodicPoint> points;
};

struct FindPeriodicOptions {
    double seed_threshold = 0.1;
    double newton_tol = 1e-10;
    int max_newton = 30;
    double dedup_tol = 1e-6;
    int workers = 1;
    double theta_pad = 0.05;  // keep the scan away from the guard band
};

inline PeriodicScan find_periodic(const AnnulusContext& ctx, int n, int grid,
                                  const FindPeriodicOptions& options = {}) {
    if (n < 1) throw DomainError("find_periodic: n must be >= 1");
    if (grid < 16) throw DomainError("find_periodic: grid density must be at least 16");

    const double th_lo = ctx.options.theta_min + options.theta_pad;
    const double th_hi = kPi - ctx.options.theta_min - options.theta_pad;

    struct Cell {
        AnnulusState s;
        double disp = 1e300;
        bool ok = false;
    };
    std::vector<Cell> cells(static_cast<std::size_t>(grid) * grid);
    parallel_map<int>(cells.size(), options.workers, [&](std::size_t idx) {
        const int i = static_cast<int>(idx) / grid, j = static_cast<int>(idx) % grid;
        Cell& c = cells[idx];
        c.s = {ctx.length * (i + 0.5) / grid, th_lo + (th_hi - th_lo) * (j + 0.5) / grid};
        try {
            const auto r = return_map_power(ctx, c.s, n);
            c.disp = annulus_displacement(ctx, r.image, c.s);
            c.ok = true;
        } catch (const NumericalError&) {
        } catch (const DomainError&) {
        }
        return 0;
    });

    PeriodicScan scan;
    // Degenerate annulus: essentially the whole grid is fixed by F^n.
    std::size_t fixed = 0, valid = 0;
    for (const auto& c : cells) {
        if (!c.ok) continue;
        ++valid;
        if (c.disp < 1e-6) ++fixed;
    }
    if (valid > 0 && fixed > valid / 2) {
        scan.degenerate_annulus = true;
        return scan;
    }

    // Seeds: local minima of the displacement below the threshold.  A fixed
    // point one cell away already shows a displacement of order the cell
    // diagonal, so the cut is widened to track the grid resolution.
    const double cell_diag = std::hypot(ctx.length / grid, (th_hi - th_lo) / grid);
    const double seed_cut = std::max(options.seed_threshold, 2.5 * cell_diag);
    std::vector<AnnulusState> seeds;
    auto at = [&](int i, int j) -> const Cell& {
        i = (i % grid + grid) % grid;
        j = std::clamp(j, 0, grid - 1);
        return cells[static_cast<std::size_t>(i) * grid + j];
    };
    for (int i = 0; i < grid; ++i)
        for (int j = 0; j < grid; ++j) {
            const Cell& c = at(i, j);
            if (!c.ok || c.disp > seed_cut) continue;
            bool is_min = true;
            for (int di = -1; is_min && di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    if (di == 0 && dj == 0) continue;
                    const Cell& nb = at(i + di, j + dj);
                    if (nb.ok && nb.disp < c.disp) is_min = false;
                }
            if (is_min) seeds.push_back(c.s);
        }

    // Newton refinement on F^n - id.
    std::vector<PeriodicPoint> found;
    for (const auto& seed : seeds) {
        AnnulusState x = seed;
        bool converged = false;
        double res = 1e300;
        Mat2 jac = Mat2::identity();
        for (int it = 0; it < options.max_newton; ++it) {
            AnnulusReturn r;
            try {
                r = return_map_power(ctx, x, n);
            } catch (const std::runtime_error&) {
                break;
            }
            const Vec2 d{wrap_symmetric(r.image.t - x.t, ctx.length), r.image.theta - x.theta};
            res = d.norm();
            jac = r.jacobian;
            if (res < options.newton_tol) {
                converged = true;
                break;
            }
            const Mat2 A = r.jacobian - Mat2::identity();
            if (std::abs(A.det()) < 1e-12) break;
            Vec2 step = solve2(A, -1.0 * d);
            const double sn = step.norm();
            if (sn > 0.2) step = step * (0.2 / sn);
            x.t = ctx.t_wrap(x.t + step.x);
            x.theta = std::clamp(x.theta + step.y, 2.0 * ctx.options.theta_min,
                                 kPi - 2.0 * ctx.options.theta_min);
        }
        if (!converged) continue;

        PeriodicPoint p;
        p.state = x;
        p.n = n;
        p.residual = res;
        p.trace_n = jac.trace();
        p.degenerate = std::abs(p.trace_n - 2.0) < 1e-6;
        found.push_back(p);
    }

    // Deduplicate by orbit equivalence and fill minimal periods.
    std::vector<PeriodicPoint> unique;
    for (auto& p : found) {
        // Orbit of p under F.
        std::vector<AnnulusState> orbit{p.state};
        int minimal = n;
        try {
            AnnulusState cur = p.state;
            for (int k = 1; k < n; ++k) {
                cur = return_map(ctx, cur).image;
                orbit.push_back(cur);
                if (minimal == n && annulus_displacement(ctx, cur, p.state) < 1e-7)
                    minimal = k;
            }
        } catch (const std::runtime_error&) {
        }
        if (n % minimal != 0) minimal = n;  // guard against near-miss detection
        p.minimal_period = minimal;

        bool dup = false;
        for (const auto& q : unique) {
            for (const auto& os : orbit)
                if (annulus_displacement(ctx, os, q.state) < options.dedup_tol) {
                    dup = true;
                    break;
                }
            if (dup) break;
        }
        if (!dup) unique.push_back(p);
    }
    scan.points = std::move(unique);
    std::sort(scan.points.begin(), scan.points.end(),
              [](const PeriodicPoint& a, const PeriodicPoint& b) {
                  return a.state.t < b.state.t ||
                         (a.state.t == b.state.t && a.state.theta < b.state.theta);
              });
    return scan;
}

}  // namespace geokit
