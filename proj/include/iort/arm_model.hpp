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

#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace iort::arm {

/// Joint order used everywhere: base yaw, three pitches, wrist roll.
enum class Joint : std::size_t { base = 0, shoulder, elbow, wrist_pitch, wrist_roll };
inline constexpr std::size_t kJointCount = 5;

/// Wire/config name of a joint angle field, e.g. "shoulder_deg".
std::string_view joint_field(Joint j);

struct JointRange {
    double min_deg = 0.0;
    double max_deg = 0.0;
    bool operator==(const JointRange&) const = default;
};

/// A point mass riding on the chain. `joint` selects the chain point it is
/// attached to (0 shoulder axis, 1 elbow, 2 wrist pitch, 3 end effector);
/// `offset_cm` moves it further along the following link.
struct MassPoint {
    double mass_g = 0.0;
    int joint = 0;
    double offset_cm = 0.0;
    bool operator==(const MassPoint&) const = default;
};

/// Immutable physical description of the arm. Defaults describe the
/// MG995-based 5-DoF build with the DAGU two-finger claw.
struct ArmProfile {
    // shoulder (L1), arm (L2), wrist (L3)
    std::array<double, 3> link_lengths_cm{6.5, 10.0, 4.5};
    std::array<JointRange, kJointCount> joint_ranges{
        JointRange{-60, 60}, JointRange{-60, 60}, JointRange{-60, 60}, JointRange{-60, 60},
        JointRange{-90, 90}};
    // MG995 joints default to 0.20 s/60deg (not a datasheet value), micro roll servo 0.18.
    std::array<double, kJointCount> servo_s_per_60deg{0.20, 0.20, 0.20, 0.20, 0.18};
    double shoulder_stall_torque_kgfcm = 20.0;
    std::vector<MassPoint> mass_points{{55.0, 1, 0.0}, {55.0, 2, 0.0}, {20.0, 3, 0.0}, {20.0, 3, 0.0}};
    double gripper_min_mm = 0.0;
    double gripper_max_mm = 50.8;

    double reach_cm() const { return link_lengths_cm[0] + link_lengths_cm[1] + link_lengths_cm[2]; }
    const JointRange& range(Joint j) const { return joint_ranges[static_cast<std::size_t>(j)]; }

    /// Throws ProfileError when an invariant is broken.
    void check() const;

    bool operator==(const ArmProfile&) const = default;
};

struct JointConfig {
    std::array<double, kJointCount> angles_deg{};
    double gripper_mm = 0.0;

    double angle(Joint j) const { return angles_deg[static_cast<std::size_t>(j)]; }
    double& angle(Joint j) { return angles_deg[static_cast<std::size_t>(j)]; }
    bool operator==(const JointConfig&) const = default;
};

struct CartesianPose {
    double x_cm = 0.0;
    double y_cm = 0.0;
    double z_cm = 0.0;
    double roll_deg = 0.0;
    double gripper_mm = 0.0;
    bool operator==(const CartesianPose&) const = default;
};

struct MotionPlan {
    JointConfig start;
    JointConfig target;
    double duration_s = 0.0;
    std::array<double, kJointCount> rate_deg_per_s{};
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class LimitError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class ProfileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

bool within_limits(const JointConfig& q, const ArmProfile& p);

/// Closed-form FK. All-zero config points straight up; pitches are measured
/// from vertical and accumulate along the chain. Wrist roll only affects
/// `roll_deg`. Total over finite inputs, limits are not checked.
CartesianPose forward_kinematics(const JointConfig& q, const ArmProfile& p);

/// Radial (horizontal) distance from the shoulder axis of each chain point:
/// shoulder, elbow, wrist pitch, end effector.
std::array<double, 4> chain_radial_cm(const JointConfig& q, const ArmProfile& p);

/// Synchronized move: every joint arrives at `duration_s`, which is set by
/// the slowest joint at its servo's rated speed. The gripper is interpolated
/// but does not set the duration.
MotionPlan plan_motion(const JointConfig& start, const JointConfig& target, const ArmProfile& p);

/// Linear per-joint interpolation; t >= duration yields exactly `target`.
JointConfig config_at(const MotionPlan& plan, double t_s);

/// Signed static moment about the shoulder pitch axis in kgf*cm; positive
/// when the load leans forward. The payload sits at the end effector.
double shoulder_torque(const JointConfig& q, double payload_g, const ArmProfile& p);

/// |shoulder_torque| within the shoulder stall budget.
bool is_liftable(const JointConfig& q, double payload_g, const ArmProfile& p);

/// Plain-text `key = value` profile format (see docs/profile.md).
ArmProfile parse_profile(std::string_view text);
ArmProfile load_profile(const std::string& path);
std::string dump_profile(const ArmProfile& p);

}  // namespace iort::arm
