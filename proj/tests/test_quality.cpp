#include "meshflow/quality.hpp"
#include "meshflow/fields.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

using namespace meshflow;
using Catch::Approx;

TEST_CASE("quality measures on a uniform mesh with M = I") {
    const auto ref = build_reference_element<2>();
    const auto mesh = uniform_square_mesh(6);
    const auto metric = constant_metric(mesh, Eigen::Matrix2d::Identity());
    const auto q = quality_measures(mesh, ref, metric);

    SECTION("Q_eq is exactly 1: all elements share one metric volume") {
        for (double v : q.per_element_eq) CHECK(v == Approx(1.0).epsilon(1e-12));
        CHECK(q.Q_eq == Approx(1.0).epsilon(1e-12));
    }
    SECTION("Q_ali coincides with Q_geo when M = I") {
        CHECK(q.Q_ali == Approx(q.Q_geo).epsilon(1e-14));
        for (int k = 0; k < q.N; ++k)
            CHECK(q.per_element_ali[k] == Approx(q.per_element_geo[k]).epsilon(1e-14));
    }
    SECTION("right triangles have the known alignment value") {
        // for a unit right triangle, F'^T F' has eigenvalue ratio fixed by the
        // reference equilateral element: Q = tr/(2 sqrt(det)) with tr = l1+l2
        for (int k = 0; k < q.N; ++k) {
            const auto geom = element_geometry(mesh, ref, k);
            const Eigen::Matrix2d S = geom.FK_prime.transpose() * geom.FK_prime;
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(S);
            const double l1 = es.eigenvalues()[0], l2 = es.eigenvalues()[1];
            CHECK(q.per_element_geo[k] ==
                  Approx((l1 + l2) / (2.0 * std::sqrt(l1 * l2))).epsilon(1e-12));
            CHECK(q.per_element_geo[k] >= 1.0);
        }
    }
}

TEST_CASE("alignment measure is 1 iff F'^T M F' is a multiple of I") {
    const auto ref = build_reference_element<2>();
    auto mesh = uniform_square_mesh(3);
    const int k = 4;
    const auto geom = element_geometry(mesh, ref, k);
    // choose M so that F'^T M F' = 2 I
    const Eigen::Matrix2d Finv = geom.FK_prime.inverse();
    const Eigen::Matrix2d M = 2.0 * Finv.transpose() * Finv;
    auto metric = constant_metric(mesh, Eigen::Matrix2d::Identity());
    for (auto& Mi : metric.nodal) Mi = M;
    const auto q = quality_measures(mesh, ref, metric);
    CHECK(q.per_element_ali[k] == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("quality measures are at least 1 on random meshes") {
    const auto ref = build_reference_element<2>();
    auto mesh = uniform_square_mesh(5);
    std::mt19937 rng(61);
    std::uniform_real_distribution<double> uni(-0.03, 0.03);
    for (int i = 0; i < mesh.num_vertices(); ++i)
        if (mesh.boundary[i].cls == VertexClass::Interior)
            mesh.vertices[i] += Eigen::Vector2d(uni(rng), uni(rng));
    auto metric = constant_metric(mesh, Eigen::Matrix2d::Identity());
    std::uniform_real_distribution<double> eig(0.5, 3.0);
    for (auto& M : metric.nodal) {
        const double a = uni(rng) * 40.0;
        Eigen::Matrix2d Q;
        Q << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        M = Q * Eigen::Vector2d(eig(rng), eig(rng)).asDiagonal() * Q.transpose();
    }
    const auto q = quality_measures(mesh, ref, metric);
    // AM-GM: trace/(d det^(1/d)) >= 1 always; equidistribution RMS >= 1 too
    for (int k = 0; k < q.N; ++k) {
        CHECK(q.per_element_ali[k] >= 1.0 - 1e-13);
        CHECK(q.per_element_geo[k] >= 1.0 - 1e-13);
    }
    CHECK(q.Q_eq >= 1.0 - 1e-13);
    // mean of Q_eq,K is exactly 1 by construction of sigma_h
    double mean = 0.0;
    for (double v : q.per_element_eq) mean += v;
    CHECK(mean / q.N == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("geometric quality is rigid-motion invariant") {
    const auto ref = build_reference_element<2>();
    auto mesh = uniform_square_mesh(4);
    std::mt19937 rng(67);
    std::uniform_real_distribution<double> uni(-0.04, 0.04);
    for (int i = 0; i < mesh.num_vertices(); ++i)
        if (mesh.boundary[i].cls == VertexClass::Interior)
            mesh.vertices[i] += Eigen::Vector2d(uni(rng), uni(rng));
    const auto metric = constant_metric(mesh, Eigen::Matrix2d::Identity());
    const auto q0 = quality_measures(mesh, ref, metric);

    const double a = 0.7;
    Eigen::Matrix2d R;
    R << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    auto moved = mesh;
    for (auto& x : moved.vertices) x = R * x + Eigen::Vector2d(3.0, -1.0);
    moved.refresh_degeneracy_tol();
    const auto q1 = quality_measures(moved, ref, constant_metric(moved, Eigen::Matrix2d::Identity()));
    CHECK(q1.Q_geo == Approx(q0.Q_geo).epsilon(1e-12));
    CHECK(q1.Q_eq == Approx(q0.Q_eq).epsilon(1e-12));
}

TEST_CASE("L2 interpolation error") {
    SECTION("linear functions interpolate exactly") {
        const auto mesh = uniform_square_mesh(5);
        const double err = l2_interpolation_error(
            mesh, [](const Eigen::Vector2d& x) { return 2.0 * x.x() - 3.0 * x.y() + 0.5; });
        CHECK(err < 1e-13);
    }
    SECTION("x^2: quadrature-exact value and O(h^2) refinement") {
        // on each element the difference is quadratic, degree-4 rule is exact;
        // halving h divides the error by 4
        auto u = [](const Eigen::Vector2d& x) { return x.x() * x.x(); };
        const double e1 = l2_interpolation_error(uniform_square_mesh(8), u);
        const double e2 = l2_interpolation_error(uniform_square_mesh(16), u);
        CHECK(e1 / e2 == Approx(4.0).epsilon(1e-10));
    }
    SECTION("quadrature weights integrate degree-4 monomials exactly") {
        // reference check of the rule itself: integral of l1^4 over the unit
        // right triangle = 2 * 1/30 normalized by area
        double s = 0.0;
        for (const auto& q : TriangleQuadrature::points()) s += q[3] * std::pow(q[0], 4);
        CHECK(s == Approx(1.0 / 15.0).epsilon(1e-12));
        double w = 0.0;
        for (const auto& q : TriangleQuadrature::points()) w += q[3];
        CHECK(w == Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("bound audit") {
    TrajectoryRecord rec;
    rec.times = {0.0, 0.1, 0.25, 0.3};
    rec.energies = {4.0, 3.0, 2.5, 2.4};
    rec.min_volume = {0.1, 0.09, 0.08, 0.08};
    rec.min_metric_altitude = {0.2, 0.18, 0.17, 0.17};
    rec.accepted_so_far = {0, 1, 2, 3};
    TrajectoryBounds bounds;
    bounds.altitude_bound = 0.05;
    bounds.volume_bound = 0.01;

    SECTION("clean trajectory passes") {
        const auto a = bound_audit(rec, bounds);
        CHECK(a.ok());
        CHECK(a.energy_monotone);
        CHECK(a.plateau_ratio == Approx(std::abs(2.4 - 2.5) / 2.4).epsilon(1e-12));
    }
    SECTION("an energy uptick is flagged at the exact index") {
        rec.energies[2] = 3.5;
        const auto a = bound_audit(rec, bounds);
        CHECK_FALSE(a.energy_monotone);
        REQUIRE(a.energy_uptick_indices.size() == 1);
        CHECK(a.energy_uptick_indices[0] == 2);
    }
    SECTION("bound violations are flagged") {
        bounds.altitude_bound = 0.175;
        bounds.volume_bound = 0.085;
        const auto a = bound_audit(rec, bounds);
        CHECK_FALSE(a.ok());
        CHECK(a.altitude_violations == std::vector<size_t>{2, 3});
        CHECK(a.volume_violations == std::vector<size_t>{2, 3});
    }
}

TEST_CASE("quality csv layout") {
    QualityReport<2> q;
    q.N = 128;
    q.Q_geo = 1.25;
    q.Q_eq = 1.0625;
    q.Q_ali = 1.03125;
    q.l2_error = 0.015625;
    std::ostringstream os;
    write_quality_csv(os, "new", q);
    write_quality_csv(os, "existing", q, false);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "functional,N,Q_geo,Q_eq,Q_ali,error");
    std::getline(is, line);
    CHECK(line == "new,128,1.25,1.0625,1.03125,0.015625");
    std::getline(is, line);
    CHECK(line.rfind("existing,128,", 0) == 0);
}
