#include "meshflow/functional.hpp"
#include "meshflow/fields.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace meshflow;
using Catch::Approx;

namespace {

Eigen::Matrix2d random_spd(std::mt19937& rng, double lo, double hi) {
    std::uniform_real_distribution<double> ang(0.0, M_PI);
    std::uniform_real_distribution<double> eig(lo, hi);
    const double a = ang(rng);
    Eigen::Matrix2d Q;
    Q << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    Eigen::Vector2d lam(eig(rng), eig(rng));
    return Q * lam.asDiagonal() * Q.transpose();
}

Eigen::Matrix2d random_nonsingular(std::mt19937& rng) {
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    Eigen::Matrix2d J;
    do {
        J << uni(rng), uni(rng), uni(rng), uni(rng);
    } while (J.determinant() < 0.1);
    return J;
}

double eval_g(const FunctionalSpec& spec, const Eigen::Matrix2d& J, const Eigen::Matrix2d& M,
              double gamma) {
    return g_derivatives<2>(J, J.determinant(), M, gamma, spec).G;
}

// central FD of G along a direction in J (detJ kept consistent) or M (symmetric)
double fd_dir_J(const FunctionalSpec& spec, const Eigen::Matrix2d& J, const Eigen::Matrix2d& M,
                double gamma, const Eigen::Matrix2d& dir, double h = 1e-6) {
    return (eval_g(spec, J + h * dir, M, gamma) - eval_g(spec, J - h * dir, M, gamma)) / (2 * h);
}

double fd_dir_M(const FunctionalSpec& spec, const Eigen::Matrix2d& J, const Eigen::Matrix2d& M,
                double gamma, const Eigen::Matrix2d& dir, double h = 1e-6) {
    return (eval_g(spec, J, M + h * dir, gamma) - eval_g(spec, J, M - h * dir, gamma)) / (2 * h);
}

// total J-derivative in the trace convention, including the detJ channel:
// d/dJ_ij G(J, det J, M) = (dG_dJ)_ji + dG_ddetJ * det(J) (J^-1)_ji
double analytic_dJ(const GDerivatives<2>& g, const Eigen::Matrix2d& J, int i, int j) {
    return g.dG_dJ(j, i) + g.dG_ddetJ * J.determinant() * J.inverse()(j, i);
}

}  // namespace

TEST_CASE("sigma_h") {
    const auto ref = build_reference_element<2>();
    auto mesh = uniform_square_mesh(5);
    SECTION("M = I gives the domain volume") {
        CHECK(sigma_h(mesh, ref, constant_metric(mesh, Eigen::Matrix2d::Identity())) ==
              Approx(1.0).epsilon(1e-12));
    }
    SECTION("M = 4I gives 4 |Omega| in 2D") {
        CHECK(sigma_h(mesh, ref, constant_metric(mesh, 4.0 * Eigen::Matrix2d::Identity())) ==
              Approx(4.0).epsilon(1e-12));
    }
    SECTION("matches an independent per-element summation") {
        std::mt19937 rng(23);
        auto field = constant_metric(mesh, Eigen::Matrix2d::Identity());
        for (auto& M : field.nodal) M = random_spd(rng, 0.5, 4.0);
        double expect = 0.0;
        for (int k = 0; k < mesh.num_elements(); ++k) {
            Eigen::Matrix2d M = Eigen::Matrix2d::Zero();
            for (int v : mesh.elements[k]) M += field.nodal[v] / 3.0;
            const auto& e = mesh.elements[k];
            const Eigen::Vector2d a = mesh.vertices[e[1]] - mesh.vertices[e[0]];
            const Eigen::Vector2d b = mesh.vertices[e[2]] - mesh.vertices[e[0]];
            expect += 0.5 * (a.x() * b.y() - a.y() * b.x()) * std::sqrt(M.determinant());
        }
        CHECK(sigma_h(mesh, ref, field) == Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("existing-functional integrand") {
    SECTION("theta = 1/2 kills the equidistribution term") {
        const auto spec = FunctionalSpec::existing(0.5, 1.0);
        const auto g = g_existing<2>(Eigen::Matrix2d::Identity(), 1.0,
                                     Eigen::Matrix2d::Identity(), spec);
        CHECK(g.G == Approx(1.0).epsilon(1e-14));
        CHECK(g.dG_ddetJ == 0.0);
    }
    SECTION("positivity for theta=1/3, p=3/2") {
        std::mt19937 rng(31);
        const auto spec = FunctionalSpec::existing(1.0 / 3.0, 1.5);
        for (int t = 0; t < 100; ++t) {
            const Eigen::Matrix2d J = random_nonsingular(rng);
            const Eigen::Matrix2d M = random_spd(rng, 0.3, 4.0);
            CHECK(g_existing<2>(J, J.determinant(), M, spec).G > 0.0);
        }
    }
    SECTION("derivatives match central finite differences") {
        std::mt19937 rng(37);
        const auto spec = FunctionalSpec::existing(1.0 / 3.0, 1.5);
        for (int t = 0; t < 100; ++t) {
            const Eigen::Matrix2d J = random_nonsingular(rng);
            const Eigen::Matrix2d M = random_spd(rng, 0.3, 4.0);
            const auto g = g_existing<2>(J, J.determinant(), M, spec);
            double scale = std::abs(g.G) + 1.0;
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) {
                    Eigen::Matrix2d dir = Eigen::Matrix2d::Zero();
                    dir(i, j) = 1.0;
                    const double fd = fd_dir_J(spec, J, M, 1.0, dir);
                    CHECK(std::abs(analytic_dJ(g, J, i, j) - fd) < 1e-6 * (std::abs(fd) + scale));
                }
            for (int i = 0; i < 2; ++i)
                for (int j = i; j < 2; ++j) {
                    Eigen::Matrix2d dir = Eigen::Matrix2d::Zero();
                    dir(i, j) = dir(j, i) = 1.0;
                    const double fd = fd_dir_M(spec, J, M, 1.0, dir);
                    const double an = (g.dG_dM * dir).trace();
                    CHECK(std::abs(an - fd) < 1e-6 * (std::abs(fd) + scale));
                }
        }
    }
    SECTION("non-SPD metric raises") {
        const auto spec = FunctionalSpec::existing();
        Eigen::Matrix2d M;
        M << 1, 0, 0, -1;
        CHECK_THROWS_AS(g_existing<2>(Eigen::Matrix2d::Identity(), 1.0, M, spec),
                        std::invalid_argument);
    }
}

TEST_CASE("new-functional integrand") {
    SECTION("vanishes with all derivatives at the combined condition") {
        const auto spec = FunctionalSpec::combined(1.0);
        const double gamma = 0.7;
        // J M^-1 J^T = gamma I with M = I: J = sqrt(gamma) R
        Eigen::Matrix2d R;
        const double a = 0.3;
        R << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        const Eigen::Matrix2d J = std::sqrt(gamma) * R;
        const auto g = g_new<2>(J, J.determinant(), Eigen::Matrix2d::Identity(), gamma, spec);
        CHECK(g.G == Approx(0.0).margin(1e-14));
        CHECK(g.dG_dJ.norm() < 1e-13);
        CHECK(g.dG_dM.norm() < 1e-13);
        CHECK(g.dG_ddetJ == 0.0);
    }
    SECTION("J = diag(2,1), M = I, gamma = 1 gives G = 9") {
        const auto spec = FunctionalSpec::combined(1.0);
        const Eigen::Matrix2d J = Eigen::Vector2d(2.0, 1.0).asDiagonal();
        CHECK(g_new<2>(J, 2.0, Eigen::Matrix2d::Identity(), 1.0, spec).G ==
              Approx(9.0).epsilon(1e-14));
    }
    SECTION("derivatives match central finite differences (p = 1 and p = 2)") {
        std::mt19937 rng(41);
        for (double p : {1.0, 2.0}) {
            const auto spec = FunctionalSpec::combined(p);
            for (int t = 0; t < 100; ++t) {
                const Eigen::Matrix2d J = random_nonsingular(rng);
                const Eigen::Matrix2d M = random_spd(rng, 0.3, 4.0);
                const double gamma = 0.8;
                const auto g = g_new<2>(J, J.determinant(), M, gamma, spec);
                double scale = std::abs(g.G) + 1.0;
                for (int i = 0; i < 2; ++i)
                    for (int j = 0; j < 2; ++j) {
                        Eigen::Matrix2d dir = Eigen::Matrix2d::Zero();
                        dir(i, j) = 1.0;
                        const double fd = fd_dir_J(spec, J, M, gamma, dir);
                        CHECK(std::abs(g.dG_dJ(j, i) - fd) < 1e-6 * (std::abs(fd) + scale));
                    }
                for (int i = 0; i < 2; ++i)
                    for (int j = i; j < 2; ++j) {
                        Eigen::Matrix2d dir = Eigen::Matrix2d::Zero();
                        dir(i, j) = dir(j, i) = 1.0;
                        const double fd = fd_dir_M(spec, J, M, gamma, dir);
                        const double an = (g.dG_dM * dir).trace();
                        CHECK(std::abs(an - fd) < 1e-6 * (std::abs(fd) + scale));
                    }
            }
        }
    }
    SECTION("invariant under orthogonal conjugation") {
        std::mt19937 rng(47);
        std::uniform_real_distribution<double> ang(0.0, 2.0 * M_PI);
        const auto spec = FunctionalSpec::combined(1.0);
        for (int t = 0; t < 50; ++t) {
            const Eigen::Matrix2d J = random_nonsingular(rng);
            const Eigen::Matrix2d M = random_spd(rng, 0.3, 4.0);
            const double a = ang(rng);
            Eigen::Matrix2d Q;
            Q << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
            const Eigen::Matrix2d Jq = Q * J * Q.transpose();
            const Eigen::Matrix2d Mq = Q * M * Q.transpose();
            CHECK(eval_g(spec, Jq, Mq, 0.9) == Approx(eval_g(spec, J, M, 0.9)).epsilon(1e-10));
        }
    }
}

TEST_CASE("energy breakdown") {
    const auto ref = build_reference_element<2>();
    std::mt19937 rng(53);
    auto mesh = uniform_square_mesh(5);
    // perturb interior vertices so nothing cancels by symmetry
    std::uniform_real_distribution<double> uni(-0.05, 0.05);
    for (int i = 0; i < mesh.num_vertices(); ++i)
        if (mesh.boundary[i].cls == VertexClass::Interior)
            mesh.vertices[i] += Eigen::Vector2d(uni(rng), uni(rng));
    auto field = constant_metric(mesh, Eigen::Matrix2d::Identity());
    for (auto& M : field.nodal) M = random_spd(rng, 0.5, 3.0);

    SECTION("theta-average identity I_h = theta I_ali + (1-theta) I_eq") {
        for (double theta : {0.2, 1.0 / 3.0, 0.5}) {
            const auto spec = FunctionalSpec::existing(theta, 1.5);
            const auto e = energy(mesh, ref, field, spec);
            CHECK(e.I_h == Approx(theta * e.I_ali + (1.0 - theta) * e.I_eq).epsilon(1e-12));
        }
    }
    SECTION("I_h equals an independent double-loop recomputation") {
        const auto spec = FunctionalSpec::combined(1.0);
        const auto e = energy(mesh, ref, field, spec);
        double expect = 0.0;
        for (int k = 0; k < mesh.num_elements(); ++k) {
            const auto& el = mesh.elements[k];
            Eigen::Matrix2d M = Eigen::Matrix2d::Zero();
            for (int v : el) M += field.nodal[v] / 3.0;
            Eigen::Matrix2d E;
            E.col(0) = mesh.vertices[el[1]] - mesh.vertices[el[0]];
            E.col(1) = mesh.vertices[el[2]] - mesh.vertices[el[0]];
            const Eigen::Matrix2d J = ref.E_hat * E.inverse();
            expect += E.determinant() / 2.0 * std::sqrt(M.determinant()) *
                      (J * M.inverse() * J.transpose() - e.gamma_h * Eigen::Matrix2d::Identity())
                          .squaredNorm();
        }
        CHECK(e.I_h == Approx(expect).epsilon(1e-12));
        CHECK(e.I_h == Approx(std::accumulate(e.per_element.begin(), e.per_element.end(), 0.0))
                           .epsilon(1e-12));
    }
    SECTION("a mesh satisfying the combined condition has zero energy") {
        const auto refmesh = uniform_square_mesh(1);
        // one pair of right triangles will not satisfy it; use the reference element itself
        SimplicialMesh<2> tri;
        tri.vertices = {ref.xi[0], ref.xi[1], ref.xi[2]};
        tri.elements = {{0, 1, 2}};
        tri.boundary.assign(3, {});
        tri.build_patches();
        tri.refresh_degeneracy_tol();
        const auto field1 = constant_metric(tri, Eigen::Matrix2d::Identity());
        const auto e = energy(tri, ref, field1, FunctionalSpec::combined(1.0));
        // sigma_h = 1, N = 1 => gamma_h = 1 and J = I
        CHECK(e.gamma_h == Approx(1.0).epsilon(1e-13));
        CHECK(e.I_h == Approx(0.0).margin(1e-13));
    }
}

TEST_CASE("coercivity constants") {
    SECTION("closed forms") {
        const auto c1 = coercivity_constants(2, 1.0, 1.0, 1.0, 1.0);
        CHECK(c1.alpha == Approx(1.0 / 8.0).epsilon(1e-14));
        CHECK(c1.beta == Approx(2.0).epsilon(1e-14));
        const auto c2 = coercivity_constants(2, 1.5, 1.0, 4.0, 1.0);
        CHECK(c2.alpha == Approx(1.0 / 2048.0).epsilon(1e-14));
        CHECK(c2.beta == Approx(std::pow(2.0, 1.5)).epsilon(1e-14));
    }
    SECTION("G >= alpha ||J||^(4p) - beta on random samples") {
        std::mt19937 rng(59);
        const double m_lower = 0.5, m_upper = 3.0, gamma = 1.2;
        for (double p : {1.0, 1.5}) {
            const auto spec = FunctionalSpec::combined(p);
            const auto cc = coercivity_constants(2, p, m_lower, m_upper, gamma);
            std::uniform_real_distribution<double> uni(-3.0, 3.0);
            for (int t = 0; t < 10000; ++t) {
                Eigen::Matrix2d J;
                J << uni(rng), uni(rng), uni(rng), uni(rng);
                if (J.determinant() <= 1e-6) continue;
                const Eigen::Matrix2d M = random_spd(rng, m_lower, m_upper);
                const double G = g_new<2>(J, J.determinant(), M, gamma, spec).G;
                REQUIRE(G >= cc.alpha * std::pow(J.norm(), 4.0 * p) - cc.beta - 1e-12);
            }
        }
    }
}

TEST_CASE("trajectory bounds") {
    SECTION("exponent arithmetic for d=2, p=1") {
        const auto cc = coercivity_constants(2, 1.0, 1.0, 1.0, 1.0);
        const auto b1 = corollary_bounds(2, 1.0, 1.0, 100, 1.0, 1.0, cc.alpha, cc.beta);
        const auto b2 = corollary_bounds(2, 1.0, 1.0, 400, 1.0, 1.0, cc.alpha, cc.beta);
        // altitude bound ~ N^(-4p/(d(4p-d))) = N^(-1); volume bound ~ N^(-2)
        CHECK(b1.altitude_bound / b2.altitude_bound == Approx(4.0).epsilon(1e-12));
        CHECK(b1.volume_bound / b2.volume_bound == Approx(16.0).epsilon(1e-12));
        CHECK(b1.C2 == Approx(b1.C1 * b1.C1 / 2.0).epsilon(1e-13));
    }
    SECTION("C1 exponent 1/(4p-d) = 1/2 at d=2, p=1") {
        const auto cc = coercivity_constants(2, 1.0, 1.0, 1.0, 1.0);
        const auto b1 = corollary_bounds(2, 1.0, 1.0, 100, 1.0, 1.0, cc.alpha, cc.beta);
        const auto b4 = corollary_bounds(2, 1.0, 1.0, 100, 1.0, 1.0, 4.0 * cc.alpha, cc.beta);
        CHECK(b4.C1 / b1.C1 == Approx(2.0).epsilon(1e-12));
    }
    SECTION("large p approaches the uniform-mesh altitude rate N^(-1/d)") {
        const double p = 50.0;
        const auto cc = coercivity_constants(2, p, 1.0, 1.0, 1.0);
        const auto b1 = corollary_bounds(2, p, 1.0, 100, 1.0, 1.0, cc.alpha, cc.beta);
        const auto b2 = corollary_bounds(2, p, 1.0, 400, 1.0, 1.0, cc.alpha, cc.beta);
        const double rate = std::log(b1.altitude_bound / b2.altitude_bound) / std::log(4.0);
        // exponent 4p/(d(4p-d)) = 0.50505... at p = 50, approaching 1/d
        CHECK(rate == Approx(4.0 * p / (2.0 * (4.0 * p - 2.0))).epsilon(1e-10));
        CHECK(std::abs(rate - 0.5) < 0.01);
    }
    SECTION("4p <= d raises") {
        CHECK_THROWS_AS(corollary_bounds(2, 0.5, 1.0, 100, 1.0, 1.0, 1.0, 1.0),
                        std::invalid_argument);
    }
}

TEST_CASE("theory-supported parameter regimes") {
    CHECK(FunctionalSpec::existing(1.0 / 3.0, 1.5).theory_supported(2));
    CHECK_FALSE(FunctionalSpec::existing(0.7, 1.5).theory_supported(2));
    CHECK(FunctionalSpec::combined(1.5).theory_supported(2));
    CHECK_FALSE(FunctionalSpec::combined(1.0).theory_supported(2));  // coercivity needs p > 1
}
