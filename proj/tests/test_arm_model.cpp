// Copyright 2026 The IoRT Arm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

#include "iort/arm_model.hpp"
#include "oracles.hpp"

using namespace iort::arm;

namespace {

JointConfig deg(double b, double s, double e, double wp, double wr, double g = 0.0) {
    JointConfig q;
    q.angles_deg = {b, s, e, wp, wr};
    q.gripper_mm = g;
    return q;
}

}  // namespace

TEST_CASE("zero configuration points straight up") {
    const ArmProfile p;
    const auto pose = forward_kinematics(JointConfig{}, p);
    CHECK(pose.x_cm == 0.0);
    CHECK(pose.y_cm == 0.0);
    CHECK(pose.z_cm == 21.0);
    CHECK(p.reach_cm() == 21.0);
}

TEST_CASE("known configuration") {
    const auto pose = forward_kinematics(deg(30, 45, -30, 15, 10, 12.5), ArmProfile{});
    CHECK(pose.x_cm == doctest::Approx(8.170).epsilon(1e-4));
    CHECK(pose.y_cm == doctest::Approx(4.717).epsilon(1e-4));
    CHECK(pose.z_cm == doctest::Approx(18.152).epsilon(1e-4));
    CHECK(pose.roll_deg == 10.0);
    CHECK(pose.gripper_mm == 12.5);
}

TEST_CASE("closed form agrees with the transform product") {
    const ArmProfile p;
    std::mt19937_64 rng(11);
    double worst = 0.0;
    for (int i = 0; i < 2000; ++i) {
        const auto q = oracle::random_config(rng, p);
        const auto pose = forward_kinematics(q, p);
        const auto ref = oracle::fk_position(q, p);
        worst = std::max({worst, std::abs(pose.x_cm - ref.x()), std::abs(pose.y_cm - ref.y()),
                          std::abs(pose.z_cm - ref.z())});
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("shipped FK test vectors agree with the transform product") {
    std::ifstream in(IORT_FK_VECTORS);
    REQUIRE(in);
    const auto doc = nlohmann::json::parse(in);
    const ArmProfile p;
    CHECK(doc.at("link_lengths_cm") == nlohmann::json(p.link_lengths_cm));
    const auto& vectors = doc.at("vectors");
    REQUIRE(vectors.size() == 50);
    for (const auto& v : vectors) {
        JointConfig q;
        q.angles_deg = v.at("angles_deg").get<std::array<double, kJointCount>>();
        q.gripper_mm = v.at("gripper_mm").get<double>();
        CHECK(within_limits(q, p));
        const auto ref = oracle::fk_position(q, p);
        const auto& pose = v.at("pose");
        CHECK(std::abs(pose.at("x_cm").get<double>() - ref.x()) <= 1e-9);
        CHECK(std::abs(pose.at("y_cm").get<double>() - ref.y()) <= 1e-9);
        CHECK(std::abs(pose.at("z_cm").get<double>() - ref.z()) <= 1e-9);
        CHECK(pose.at("roll_deg").get<double>() == q.angle(Joint::wrist_roll));
        CHECK(pose.at("gripper_mm").get<double>() == q.gripper_mm);
    }
}

TEST_CASE("base yaw rotates the pose about z") {
    const ArmProfile p;
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> d(-30.0, 30.0);
    for (int i = 0; i < 500; ++i) {
        auto q = oracle::random_config(rng, p);
        q.angles_deg[0] = d(rng);
        const double delta = d(rng);
        auto q2 = q;
        q2.angles_deg[0] += delta;
        const auto a = forward_kinematics(q, p);
        const auto b = forward_kinematics(q2, p);
        const double c = std::cos(delta * M_PI / 180.0), s = std::sin(delta * M_PI / 180.0);
        CHECK(b.x_cm == doctest::Approx(c * a.x_cm - s * a.y_cm).epsilon(1e-12).scale(21));
        CHECK(b.y_cm == doctest::Approx(s * a.x_cm + c * a.y_cm).epsilon(1e-12).scale(21));
        CHECK(b.z_cm == a.z_cm);
    }
}

TEST_CASE("wrist roll and gripper never move the tip") {
    const ArmProfile p;
    std::mt19937_64 rng(13);
    for (int i = 0; i < 200; ++i) {
        auto q = oracle::random_config(rng, p);
        auto q2 = q;
        q2.angles_deg[4] = -q.angles_deg[4];
        q2.gripper_mm = 50.8 - q.gripper_mm;
        const auto a = forward_kinematics(q, p), b = forward_kinematics(q2, p);
        CHECK(a.x_cm == b.x_cm);
        CHECK(a.y_cm == b.y_cm);
        CHECK(a.z_cm == b.z_cm);
    }
}

TEST_CASE("tip stays within reach") {
    const ArmProfile p;
    std::mt19937_64 rng(14);
    for (int i = 0; i < 1000; ++i) {
        const auto pose = forward_kinematics(oracle::random_config(rng, p), p);
        CHECK(std::hypot(pose.x_cm, pose.y_cm, pose.z_cm) <= p.reach_cm() + 1e-12);
    }
}

TEST_CASE("FK rejects non-finite angles") {
    CHECK_THROWS_AS(forward_kinematics(deg(std::nan(""), 0, 0, 0, 0), ArmProfile{}), DomainError);
    CHECK_THROWS_AS(forward_kinematics(deg(0, INFINITY, 0, 0, 0), ArmProfile{}), DomainError);
}

TEST_CASE("joint limits are inclusive") {
    const ArmProfile p;
    for (std::size_t j = 0; j < 4; ++j) {
        for (double edge : {-60.0, 60.0}) {
            JointConfig q;
            q.angles_deg[j] = edge;
            CHECK(within_limits(q, p));
            q.angles_deg[j] = std::nextafter(edge, edge * 2);
            CHECK_FALSE(within_limits(q, p));
        }
    }
    JointConfig q;
    q.gripper_mm = 50.8;
    CHECK(within_limits(q, p));
    q.gripper_mm = 50.9;
    CHECK_FALSE(within_limits(q, p));
    q.gripper_mm = -0.1;
    CHECK_FALSE(within_limits(q, p));
    q = JointConfig{};
    q.angles_deg[4] = 90.0;
    CHECK(within_limits(q, p));
    q.angles_deg[4] = std::nan("");
    CHECK_FALSE(within_limits(q, p));
}

TEST_CASE("motion duration follows the slowest joint") {
    const ArmProfile p;
    SUBCASE("60 degrees of wrist roll") {
        const auto plan = plan_motion(JointConfig{}, deg(0, 0, 0, 0, 60), p);
        CHECK(plan.duration_s == 0.18);
    }
    SUBCASE("90 degrees of wrist roll") {
        const auto plan = plan_motion(JointConfig{}, deg(0, 0, 0, 0, 90), p);
        CHECK(std::llround(plan.duration_s * 1e6) == 270000);
    }
    SUBCASE("60 degrees of shoulder") {
        const auto plan = plan_motion(JointConfig{}, deg(0, 60, 0, 0, 0), p);
        CHECK(plan.duration_s == doctest::Approx(0.20));
    }
    SUBCASE("no move") {
        const auto plan = plan_motion(deg(1, 2, 3, 4, 5), deg(1, 2, 3, 4, 5), p);
        CHECK(plan.duration_s == 0.0);
        CHECK(config_at(plan, 0.0) == plan.target);
    }
    SUBCASE("gripper does not set the duration") {
        const auto plan = plan_motion(JointConfig{}, deg(0, 0, 0, 0, 0, 50.8), p);
        CHECK(plan.duration_s == 0.0);
    }
}

TEST_CASE("joints arrive together") {
    const ArmProfile p;
    std::mt19937_64 rng(15);
    for (int i = 0; i < 200; ++i) {
        const auto a = oracle::random_config(rng, p), b = oracle::random_config(rng, p);
        const auto plan = plan_motion(a, b, p);
        REQUIRE(plan.duration_s > 0.0);
        CHECK(config_at(plan, plan.duration_s) == b);
        CHECK(config_at(plan, 0.0) == a);
        const double t = plan.duration_s * 0.5;
        const auto mid = config_at(plan, t);
        for (std::size_t j = 0; j < kJointCount; ++j) {
            const double total = b.angles_deg[j] - a.angles_deg[j];
            // every joint has covered the same fraction of its travel
            CHECK(mid.angles_deg[j] - a.angles_deg[j] == doctest::Approx(0.5 * total).epsilon(1e-9).scale(1));
            CHECK(plan.rate_deg_per_s[j] * plan.duration_s == doctest::Approx(std::abs(total)).scale(1));
            // and none beats its rated speed
            CHECK(plan.rate_deg_per_s[j] <= 60.0 / p.servo_s_per_60deg[j] * (1 + 1e-12));
        }
    }
}

TEST_CASE("planning checks limits and sample times") {
    const ArmProfile p;
    CHECK_THROWS_AS(plan_motion(JointConfig{}, deg(61, 0, 0, 0, 0), p), LimitError);
    CHECK_THROWS_AS(plan_motion(deg(0, 0, 0, 0, 91), JointConfig{}, p), LimitError);
    const auto plan = plan_motion(JointConfig{}, deg(10, 0, 0, 0, 0), p);
    CHECK_THROWS_AS(config_at(plan, -1e-9), DomainError);
    CHECK_THROWS_AS(config_at(plan, std::nan("")), DomainError);
    CHECK(config_at(plan, 1e9) == plan.target);
}

TEST_CASE("shoulder torque matches the transform-based moment sum") {
    const ArmProfile p;
    const auto q = deg(0, 60, 30, 0, 0);
    const double tau = shoulder_torque(q, 0.0, p);
    CHECK(std::abs(tau - oracle::shoulder_torque(q, 0.0, p)) <= 1e-4);
    CHECK(tau == doctest::Approx(1.9744).epsilon(1e-4));

    std::mt19937_64 rng(16);
    std::uniform_real_distribution<double> payload(0.0, 500.0);
    for (int i = 0; i < 1000; ++i) {
        const auto r = oracle::random_config(rng, p);
        const double g = payload(rng);
        CHECK(shoulder_torque(r, g, p) == doctest::Approx(oracle::shoulder_torque(r, g, p)).epsilon(1e-12).scale(1));
    }
}

TEST_CASE("torque is signed and mirror-symmetric") {
    const ArmProfile p;
    CHECK(shoulder_torque(JointConfig{}, 100.0, p) == 0.0);
    const auto fwd = shoulder_torque(deg(0, 40, 20, 10, 0), 50.0, p);
    const auto back = shoulder_torque(deg(0, -40, -20, -10, 0), 50.0, p);
    CHECK(fwd > 0.0);
    CHECK(back == doctest::Approx(-fwd));
}

TEST_CASE("liftability flips at the threshold payload") {
    const ArmProfile p;
    const auto q = deg(0, 60, 30, 0, 0);
    const double r_tip = oracle::shoulder_torque(q, 1000.0, p) - oracle::shoulder_torque(q, 0.0, p);  // kgf*cm per kg
    const double threshold_g = (20.0 - oracle::shoulder_torque(q, 0.0, p)) / r_tip * 1000.0;
    CHECK(p.shoulder_stall_torque_kgfcm == 20.0);
    CHECK(is_liftable(q, threshold_g - 1.0, p));
    CHECK_FALSE(is_liftable(q, threshold_g + 1.0, p));
}

TEST_CASE("profile text round trip") {
    ArmProfile p;
    p.link_lengths_cm = {7, 11, 5};
    p.joint_ranges[2] = JointRange{-45, 50};
    p.servo_s_per_60deg[0] = 0.17;
    p.mass_points = {{10, 0, 1.5}, {30, 3, 0}};
    p.gripper_max_mm = 40;
    const auto text = dump_profile(p);
    CHECK(parse_profile(text) == p);
    CHECK(parse_profile(dump_profile(ArmProfile{})) == ArmProfile{});
    CHECK(parse_profile("") == ArmProfile{});
    CHECK(parse_profile("masses = none\n").mass_points.empty());
}

TEST_CASE("profile errors name the line") {
    CHECK_THROWS_WITH_AS(parse_profile("range.elbow = 10 -10\n"), doctest::Contains("elbow"), ProfileError);
    CHECK_THROWS_WITH_AS(parse_profile("\nbogus = 1\n"), doctest::Contains("line 2"), ProfileError);
    CHECK_THROWS_AS(parse_profile("link_lengths_cm = 1 2\n"), ProfileError);
    CHECK_THROWS_AS(parse_profile("range.knee = -1 1\n"), ProfileError);
    CHECK_THROWS_AS(parse_profile("mass = 10 4 0\n"), ProfileError);
    CHECK_THROWS_AS(parse_profile("speed_s_per_60deg.base = 0\n"), ProfileError);
    CHECK_THROWS_AS(load_profile("/nonexistent/profile.conf"), ProfileError);
}
