#pragma once

#include <cmath>
#include <string>

#include "geokit/common.hpp"
#include "geokit/jet.hpp"

namespace geokit {

// ---------------------------------------------------------------------------
// Atlas of the abstract sphere: two stereographic charts.
//
//   North chart, coordinates (u, v), covers everything but the south pole:
//     X = 2u/(1+r^2),  Y = 2v/(1+r^2),  Z = (1-r^2)/(1+r^2),   r^2 = u^2+v^2
//   South chart, coordinates (u, v), covers everything but the north pole:
//     X = 2u/(1+r^2),  Y = -2v/(1+r^2), Z = -(1-r^2)/(1+r^2)
//
// The transition map in either direction is (u, v) -> (u, -v)/r^2, which is
// w -> 1/w on the complex plane: an involution, holomorphic away from the
// origin, so the two charts induce the same orientation on the sphere.  The
// unit-sphere position (X, Y, Z) is a metric-independent label for a point;
// all metrics in the library live on this fixed atlas.
// ---------------------------------------------------------------------------

enum class ChartId : int { North = 0, South = 1 };

inline const char* chart_name(ChartId c) { return c == ChartId::North ? "north" : "south"; }

// Chart coordinates are accepted while r <= kChartDomainRadius; integrators
// hand over to the partner chart once r exceeds kChartSwitchRadius (20% from
// the boundary), which lands at r = 1/kChartSwitchRadius on the other side.
inline constexpr double kChartDomainRadius = 2.5;
inline constexpr double kChartSwitchRadius = 2.0;
inline constexpr double kChartOverlapInner = 1.0 / kChartDomainRadius;

struct SurfacePoint {
    ChartId chart = ChartId::North;
    Vec2 coords;

    SurfacePoint() = default;
    SurfacePoint(ChartId c, double u, double v) : chart(c), coords(u, v) {}
    SurfacePoint(ChartId c, const Vec2& uv) : chart(c), coords(uv) {}
};

inline bool in_chart_domain(const SurfacePoint& p) {
    return p.coords.norm() <= kChartDomainRadius;
}

// Position on the abstract unit sphere (metric-independent).
inline Vec3 sphere_position(const SurfacePoint& p) {
    const double r2 = p.coords.norm2();
    const double s = 1.0 / (1.0 + r2);
    if (p.chart == ChartId::North)
        return {2.0 * p.coords.x * s, 2.0 * p.coords.y * s, (1.0 - r2) * s};
    return {2.0 * p.coords.x * s, -2.0 * p.coords.y * s, -(1.0 - r2) * s};
}

// Jacobian d(sphere position)/d(chart coords), columns d/du and d/dv.
inline void sphere_frame(const SurfacePoint& p, Vec3& eu, Vec3& ev) {
    const double u = p.coords.x, v = p.coords.y;
    const double r2 = u * u + v * v;
    const double s = 1.0 / (1.0 + r2);
    const double s2 = s * s;
    // d/du of 2u s, 2v s, (1-r2) s  with ds/du = -2u s^2
    eu = {2.0 * s - 4.0 * u * u * s2, -4.0 * u * v * s2, -4.0 * u * s2};
    ev = {-4.0 * u * v * s2, 2.0 * s - 4.0 * v * v * s2, -4.0 * v * s2};
    if (p.chart == ChartId::South) {
        eu.y = -eu.y;
        ev.y = -ev.y;
        eu.z = -eu.z;
        ev.z = -ev.z;
    }
}

// Push a chart tangent vector to the unit-sphere tangent space (proxy only;
// lengths are measured by whatever metric is in force, not by this map).
inline Vec3 sphere_tangent(const SurfacePoint& p, const Vec2& w) {
    Vec3 eu, ev;
    sphere_frame(p, eu, ev);
    return eu * w.x + ev * w.y;
}

inline ChartId other_chart(ChartId c) {
    return c == ChartId::North ? ChartId::South : ChartId::North;
}

// Chart coordinates of a unit-sphere position in the requested chart.
inline SurfacePoint chart_from_sphere(const Vec3& q, ChartId chart) {
    if (chart == ChartId::North) {
        if (1.0 + q.z < 1e-14) throw DomainError("chart_from_sphere: south pole not in north chart");
        return {ChartId::North, q.x / (1.0 + q.z), q.y / (1.0 + q.z)};
    }
    if (1.0 - q.z < 1e-14) throw DomainError("chart_from_sphere: north pole not in south chart");
    return {ChartId::South, q.x / (1.0 - q.z), -q.y / (1.0 - q.z)};
}

// Best chart: the one where the point sits closest to the chart origin.
inline SurfacePoint chart_from_sphere(const Vec3& q) {
    return chart_from_sphere(q, q.z >= 0.0 ? ChartId::North : ChartId::South);
}

// Pull a unit-sphere tangent vector (must be tangent: dot(q, w3) = 0) back to
// chart coordinates at p.
inline Vec2 chart_tangent_from_sphere(const SurfacePoint& p, const Vec3& w3) {
    Vec3 eu, ev;
    sphere_frame(p, eu, ev);
    // Solve [eu ev] w = w3 in the least-squares sense (w3 tangent -> exact).
    const double a = dot(eu, eu), b = dot(eu, ev), c = dot(ev, ev);
    const double r1 = dot(eu, w3), r2 = dot(ev, w3);
    const double det = a * c - b * b;
    return {(r1 * c - r2 * b) / det, (a * r2 - b * r1) / det};
}

// Transition map between the two charts.  Defined on the overlap annulus;
// throws DomainError outside it.
inline SurfacePoint transition(const SurfacePoint& p, ChartId target) {
    if (p.chart == target) return p;
    const double r2 = p.coords.norm2();
    if (r2 < kChartOverlapInner * kChartOverlapInner)
        throw DomainError("transition: point outside chart overlap (too close to pole)");
    return {target, p.coords.x / r2, -p.coords.y / r2};
}

// Jacobian of the transition map at p (2x2, in chart coordinates).
inline Mat2 transition_jacobian(const SurfacePoint& p) {
    const double u = p.coords.x, v = p.coords.y;
    const double r2 = u * u + v * v;
    if (r2 < kChartOverlapInner * kChartOverlapInner)
        throw DomainError("transition_jacobian: point outside chart overlap");
    const double r4 = r2 * r2;
    // d(u/r^2)/du = 1/r^2 - 2u^2/r^4, etc., with the v-flip.
    return {1.0 / r2 - 2.0 * u * u / r4, -2.0 * u * v / r4,
            2.0 * u * v / r4, -(1.0 / r2 - 2.0 * v * v / r4)};
}

// Transport a tangent vector through the transition map.
inline Vec2 transition_tangent(const SurfacePoint& p, const Vec2& w) {
    return transition_jacobian(p) * w;
}

// Unit-sphere embedding as order-3 jets in the chart coordinates of p; the
// basis for every analytic metric evaluation.
inline void sphere_embedding_jets(const SurfacePoint& p, Jet3& X, Jet3& Y, Jet3& Z) {
    const Jet3 u = Jet3::var_u(p.coords.x);
    const Jet3 v = Jet3::var_v(p.coords.y);
    const Jet3 r2 = u * u + v * v;
    const Jet3 s = reciprocal(r2 + 1.0);
    X = 2.0 * u * s;
    Y = 2.0 * v * s;
    Z = (1.0 - r2) * s;
    if (p.chart == ChartId::South) {
        Y = -Y;
        Z = -Z;
    }
}

// Chordal distance between two points via the fixed embedding.  Metric-free
// proxy used for deduplication, seeding and patch prefilters.
inline double chordal_distance(const SurfacePoint& a, const SurfacePoint& b) {
    return (sphere_position(a) - sphere_position(b)).norm();
}

}  // namespace geokit
