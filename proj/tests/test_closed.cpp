#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "geokit/closed.hpp"

using namespace geokit;

namespace {

double ellipse_length(double p, double q) {
    return integrate_adaptive(
        [&](double phi) {
            const double s = p * std::sin(phi), c = q * std::cos(phi);
            return std::sqrt(s * s + c * c);
        },
        0.0, kTwoPi, 1e-12);
}

// Loop sampling the circle at chart radius r (north chart).
LoopCurve chart_circle_loop(const MetricField& m, double r, int n) {
    LoopCurve loop;
    for (int i = 0; i < n; ++i) {
        const double a = kTwoPi * i / n;
        loop.vertices.push_back({ChartId::North, r * std::cos(a), r * std::sin(a)});
    }
    loop.length = loop_length(m, loop.vertices);
    return loop;
}

UnitTangentState principal_seed(const MetricField& m, const Vec3& start, const Vec3& dir) {
    const auto p = chart_from_sphere(start * (1.0 / start.norm()));
    const Vec2 w = chart_tangent_from_sphere(p, dir);
    return make_unit_state(m, p, w);
}

// Bumped round sphere with a strong rotationally symmetric polar bump: the
// profile radius develops a "neck" parallel with negative curvature, giving a
// hyperbolic closed geodesic along which f1 never vanishes.
struct NeckMetric {
    MetricField m = MetricField::bumped_round(1.0, {{Vec3{0.0, 0.0, 1.0}, 1.2, 0.446}});
    double neck_radius = 0.0;  // chart radius of the neck parallel

    NeckMetric() {
        // Metric circumference of the chart circle of radius r.
        auto circ = [&](double r) {
            const auto jet = eval_metric(m, {ChartId::North, r, 0.0});
            return kTwoPi * r * std::sqrt(jet.g.d);  // |d/dv| along the circle
        };
        // The profile rises from zero, peaks inside the bump slope, dips to
        // the neck (interior local minimum) and rises again toward the
        // equator.  Find the derivative sign change from - to +.
        double best_r = 0.0;
        double prev_r = 0.05, prev_c = circ(prev_r);
        bool descending = false;
        for (int i = 1; i <= 400 && best_r == 0.0; ++i) {
            const double r = 0.05 + (1.0 - 0.05) * i / 400.0;
            const double c = circ(r);
            if (c < prev_c) descending = true;
            if (descending && c > prev_c) best_r = prev_r;
            prev_r = r;
            prev_c = c;
        }
        REQUIRE(best_r > 0.0);
        // Golden-section polish.
        double a = best_r - 0.01, b = best_r + 0.01;
        for (int it = 0; it < 60; ++it) {
            const double m1 = a + 0.382 * (b - a), m2 = a + 0.618 * (b - a);
            if (circ(m1) < circ(m2))
                b = m2;
            else
                a = m1;
        }
        neck_radius = 0.5 * (a + b);
    }

    UnitTangentState seed() const {
        return make_unit_state(m, {ChartId::North, neck_radius, 0.0}, {0.0, 1.0});
    }
    double circumference() const {
        const auto jet = eval_metric(m, {ChartId::North, neck_radius, 0.0});
        return kTwoPi * neck_radius * std::sqrt(jet.g.d);
    }
};

}  // namespace

TEST_CASE("diophantine finite check") {
    SECTION("exact rationals violate") {
        const auto r1 = check_diophantine(1.0 / 3.0, 0.1, 0.1, 100);
        REQUIRE_FALSE(r1.passed);
        CHECK(r1.violation_n == 3);
        CHECK(r1.violation_m == 1);

        const auto r2 = check_diophantine(0.5, 0.1, 0.1, 100);
        REQUIRE_FALSE(r2.passed);
        CHECK(r2.violation_n == 2);
        CHECK(r2.violation_m == 1);
    }

    SECTION("golden mean passes with c = 0.2, tau = 0.01, Q = 1e4") {
        const double golden = 0.5 * (std::sqrt(5.0) - 1.0);
        const auto rep = check_diophantine(golden, 0.2, 0.01, 10000);
        CHECK(rep.passed);
    }

    SECTION("Q below 2 is rejected") {
        CHECK_THROWS_AS(check_diophantine(0.3, 0.1, 0.1, 1), DomainError);
    }
}

TEST_CASE("trace powers") {
    SECTION("identity monodromy gives 2 for every k") {
        for (int k : {1, 2, 5, 11}) CHECK(trace_power(Mat2::identity(), k) == 2.0);
    }

    SECTION("quarter rotation squared gives -2") {
        const Mat2 R{0.0, -1.0, 1.0, 0.0};  // rho = 1/4
        CHECK(trace_power(R, 2) == Catch::Approx(-2.0).margin(1e-14));
    }

    SECTION("hyperbolic powers match the eigenvalue oracle") {
        // Exactly unimodular: [[2.5, 1.2], [1.0, (1 + 1.2)/2.5]].
        const Mat2 M{2.5, 1.2, 1.0, (1.0 + 1.2) / 2.5};
        REQUIRE(M.det() == Catch::Approx(1.0).margin(1e-15));
        const double tr = M.trace();
        const double lam = 0.5 * (tr + std::sqrt(tr * tr - 4.0));
        for (int k : {2, 3, 7}) {
            const double via_recurrence = trace_power(M, k);
            const double via_eigen = std::pow(lam, k) + std::pow(lam, -k);
            CHECK(via_recurrence == Catch::Approx(via_eigen).margin(1e-8));
        }
    }
}

TEST_CASE("classification") {
    SECTION("trace near 2 lands in the parabolic band") {
        const Mat2 M{1.0 + 2e-7, 0.0, 1.0, 1.0 + 2e-7};
        CHECK(classify_monodromy(M).tag == StabilityType::Parabolic);
    }
    SECTION("elliptic rotation-number branch follows the lower-left sign") {
        const double rho = 0.3;
        const Mat2 R{std::cos(kTwoPi * rho), -std::sin(kTwoPi * rho),
                     std::sin(kTwoPi * rho), std::cos(kTwoPi * rho)};
        CHECK(classify_monodromy(R).rho == Catch::Approx(rho).margin(1e-12));
        const Mat2 Rr{std::cos(kTwoPi * rho), std::sin(kTwoPi * rho),
                      -std::sin(kTwoPi * rho), std::cos(kTwoPi * rho)};
        CHECK(classify_monodromy(Rr).rho == Catch::Approx(1.0 - rho).margin(1e-12));
    }
    SECTION("hyperbolic eigenvalue satisfies Tr = lambda + 1/lambda") {
        const Mat2 M{3.0, 1.0, 2.0, 1.0};  // det = 1, Tr = 4
        const auto cl = classify_monodromy(M);
        REQUIRE(cl.tag == StabilityType::Hyperbolic);
        CHECK(cl.lambda + 1.0 / cl.lambda == Catch::Approx(M.trace()).margin(1e-10));
        CHECK(std::abs(cl.lambda) > 1.0);
    }
}

TEST_CASE("refine closed geodesics") {
    SECTION("round sphere great circle: period 2 pi, identity monodromy, parabolic") {
        const auto m = MetricField::round(1.0);
        const auto seed = make_unit_state(m, {ChartId::North, 1.0, 0.0}, {0.0, 1.0});
        const auto g = refine_closed(m, seed, 6.2);
        CHECK(g.period == Catch::Approx(kTwoPi).margin(1e-8));
        CHECK(g.closure_defect < 1e-8);
        CHECK(std::abs(g.monodromy.a - 1.0) < 1e-8);
        CHECK(std::abs(g.monodromy.b) < 1e-8);
        CHECK(std::abs(g.monodromy.c) < 1e-8);
        CHECK(std::abs(g.monodromy.d - 1.0) < 1e-8);
        CHECK(g.classification.tag == StabilityType::Parabolic);
    }

    SECTION("ellipsoid principal ellipses classify as expected") {
        const auto m = MetricField::ellipsoid(1.0, 1.1, 1.3);

        // Extreme-axes (x-z) ellipse: hyperbolic.
        const auto hx = refine_closed(
            m, principal_seed(m, {1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}), ellipse_length(1.0, 1.3));
        CHECK(hx.classification.tag == StabilityType::Hyperbolic);
        CHECK(std::abs(hx.monodromy.trace()) > 2.0);
        CHECK(hx.period == Catch::Approx(ellipse_length(1.0, 1.3)).margin(1e-7));
        CHECK(hx.closure_defect < 1e-8);

        // Waist (x-y) ellipse: elliptic, rotation number reproducible across
        // integration tolerances.
        RefineOptions tight;
        tight.flow_tol = 1e-12;
        RefineOptions loose;
        loose.flow_tol = 1e-9;
        const auto seed_xy = principal_seed(m, {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0});
        const auto e1 = refine_closed(m, seed_xy, ellipse_length(1.0, 1.1), loose);
        const auto e2 = refine_closed(m, seed_xy, ellipse_length(1.0, 1.1), tight);
        REQUIRE(e1.classification.tag == StabilityType::Elliptic);
        REQUIRE(e2.classification.tag == StabilityType::Elliptic);
        CHECK(e1.classification.rho > 0.0);
        CHECK(e1.classification.rho < 1.0);
        CHECK(e1.classification.rho == Catch::Approx(e2.classification.rho).margin(1e-6));

        // y-z ellipse: elliptic as well.
        const auto eyz = refine_closed(
            m, principal_seed(m, {0.0, 1.1, 0.0}, {0.0, 0.0, 1.0}), ellipse_length(1.1, 1.3));
        CHECK(eyz.classification.tag == StabilityType::Elliptic);
    }

    SECTION("trace is invariant under base-point changes and reversal") {
        const auto m = MetricField::ellipsoid(1.0, 1.1, 1.3);
        const auto g = refine_closed(
            m, principal_seed(m, {1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}), ellipse_length(1.0, 1.3));
        const double tr = g.monodromy.trace();
        for (int i = 1; i <= 10; ++i) {
            const auto gb = rebase_closed(m, g, g.period * i / 10.5);
            CHECK(gb.monodromy.trace() == Catch::Approx(tr).margin(1e-6));
            CHECK(gb.period == Catch::Approx(g.period).margin(1e-7));
        }
        // Reversed orbit has the same trace.
        const auto rev =
            refine_closed(m, UnitTangentState{g.init.point, -g.init.direction}, g.period);
        CHECK(rev.monodromy.trace() == Catch::Approx(tr).margin(1e-6));
    }
}

TEST_CASE("birkhoff midpoint shortening") {
    SECTION("round equator is a fixed point") {
        const auto m = MetricField::round(1.0);
        auto loop = chart_circle_loop(m, 1.0, 64);
        ShortenOptions opt;
        opt.max_sweeps = 20;
        const auto out = shorten_loop(m, loop, opt);
        CHECK_FALSE(out.collapsed);
        CHECK(out.length == Catch::Approx(kTwoPi).margin(1e-6));
        for (const auto& p : out.vertices)
            CHECK(p.coords.norm() == Catch::Approx(1.0).margin(1e-9));
    }

    SECTION("small circle collapses toward a point") {
        const auto m = MetricField::round(1.0);
        // Colatitude pi/4 <=> chart radius tan(pi/8).
        auto loop = chart_circle_loop(m, std::tan(kPi / 8.0), 16);
        ShortenOptions opt;
        opt.max_sweeps = 400;
        opt.length_tol = 0.0;
        const auto out = shorten_loop(m, loop, opt);
        CHECK(out.collapsed);
    }

    SECTION("ellipsoid loop near the waist converges to the shortest principal ellipse") {
        const auto m = MetricField::ellipsoid(1.0, 1.1, 1.3);
        // Tilted start near the x-y plane.
        LoopCurve loop;
        const int n = 32;
        for (int i = 0; i < n; ++i) {
            const double a = kTwoPi * i / n;
            const Vec3 q{std::cos(a), std::sin(a) * std::cos(0.18), std::sin(a) * 0.18};
            loop.vertices.push_back(chart_from_sphere(q * (1.0 / q.norm())));
        }
        loop.length = loop_length(m, loop.vertices);

        ShortenOptions opt;
        opt.max_sweeps = 300;
        opt.length_tol = 1e-10;
        const auto out = shorten_loop(m, loop, opt);
        REQUIRE_FALSE(out.collapsed);

        const double Lxy = ellipse_length(1.0, 1.1);
        const double Lxz = ellipse_length(1.0, 1.3);
        const double Lyz = ellipse_length(1.1, 1.3);
        REQUIRE(Lxy < Lxz);
        REQUIRE(Lxz < Lyz);
        CHECK(out.length == Catch::Approx(Lxy).margin(2e-3));
        CHECK(out.length >= Lxy - 1e-9);  // shortening cannot undershoot the minimum

        // Newton refinement lands exactly on the waist ellipse.
        const auto g = refine_closed(m, out);
        CHECK(g.period == Catch::Approx(Lxy).margin(1e-7));
        CHECK(g.classification.tag == StabilityType::Elliptic);
    }

    SECTION("sweeps never increase the length") {
        const auto m = MetricField::ellipsoid(1.0, 1.1, 1.3);
        LoopCurve loop = chart_circle_loop(m, 0.9, 24);
        double prev = loop.length;
        for (int s = 0; s < 6; ++s) {
            ShortenOptions one;
            one.max_sweeps = 1;
            one.length_tol = 0.0;
            loop = shorten_loop(m, loop, one);
            CHECK(loop.length <= prev + 1e-12);
            prev = loop.length;
        }
    }
}

TEST_CASE("trace via the f1 integral formula") {
    SECTION("flat synthetic arc gives exactly 2") {
        // Hand-built arc with K = 0 data: f1 = 1, f1' = 0, f2 = t, f2' = 1.
        const double T = 4.0;
        ClosedGeodesic g;
        ArcStep st;
        st.t0 = 0.0;
        st.t1 = T;
        st.chart = ChartId::North;
        const std::array<double, 8> y0{0, 0, 1, 0, 1, 0, 0, 1};
        const std::array<double, 8> y1{0, 0, 1, 0, 1, 0, T, 1};
        for (int i = 0; i < 8; ++i) {
            st.rcont[0][i] = y0[i];
            st.rcont[1][i] = y1[i] - y0[i];
            st.rcont[2][i] = st.rcont[3][i] = st.rcont[4][i] = 0.0;
        }
        g.arc.steps.push_back(st);
        g.arc.t_end = T;
        g.period = T;
        g.monodromy = {1.0, T, 0.0, 1.0};
        CHECK(trace_via_f1(g) == Catch::Approx(2.0).margin(1e-10));
    }

    SECTION("round great circle: formula inapplicable (f1 = cos vanishes)") {
        const auto m = MetricField::round(1.0);
        const auto seed = make_unit_state(m, {ChartId::North, 1.0, 0.0}, {0.0, 1.0});
        const auto g = refine_closed(m, seed, kTwoPi);
        CHECK_THROWS_AS(trace_via_f1(g), FormulaInapplicableError);
    }

    SECTION("neck geodesic: nonvanishing f1, formula matches monodromy trace") {
        const NeckMetric nm;
        REQUIRE(nm.neck_radius > 0.06);
        REQUIRE(nm.neck_radius < 0.99);
        RefineOptions opt;
        opt.flow_tol = 1e-12;
        const auto g = refine_closed(nm.m, nm.seed(), nm.circumference(), opt);
        REQUIRE(g.classification.tag == StabilityType::Hyperbolic);
        const double via_formula = trace_via_f1(g);
        CHECK(via_formula == Catch::Approx(g.monodromy.trace()).margin(1e-6));

        // Constant-curvature oracle: K is constant on the neck parallel, so
        // the trace must be 2 cosh(sqrt(-K) T).
        const double K = eval_metric(nm.m, g.init.point).curvature;
        REQUIRE(K < 0.0);
        CHECK(g.monodromy.trace() ==
              Catch::Approx(2.0 * std::cosh(std::sqrt(-K) * g.period)).margin(1e-5));

        // Wronskian along the closed arc.
        double worst = 0.0;
        for (int i = 0; i <= 200; ++i) {
            const auto j = g.arc.jacobi_at(g.period * std::max(i, 1) / 200.0);
            worst = std::max(worst, std::abs(j[0] * j[3] - j[1] * j[2] - 1.0));
        }
        CHECK(worst < 1e-8);
    }
}
