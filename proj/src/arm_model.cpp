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

#include "iort/arm_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "text_util.hpp"

namespace iort::arm {

namespace {

constexpr std::array<std::string_view, kJointCount> kJointNames{"base", "shoulder", "elbow",
                                                               "wrist_pitch", "wrist_roll"};

constexpr double kDegToRad = std::numbers::pi / 180.0;

void require_finite(const JointConfig& q) {
    for (double a : q.angles_deg) {
        if (!std::isfinite(a)) throw DomainError("joint angle is not finite");
    }
    if (!std::isfinite(q.gripper_mm)) throw DomainError("gripper aperture is not finite");
}

// Cumulative pitch of each link, measured from vertical.
std::array<double, 3> link_pitches_rad(const JointConfig& q) {
    const double p1 = q.angle(Joint::shoulder);
    const double p2 = p1 + q.angle(Joint::elbow);
    const double p3 = p2 + q.angle(Joint::wrist_pitch);
    return {p1 * kDegToRad, p2 * kDegToRad, p3 * kDegToRad};
}

}  // namespace

std::string_view joint_field(Joint j) {
    static constexpr std::array<std::string_view, kJointCount> fields{
        "base_deg", "shoulder_deg", "elbow_deg", "wrist_pitch_deg", "wrist_roll_deg"};
    return fields[static_cast<std::size_t>(j)];
}

void ArmProfile::check() const {
    for (double l : link_lengths_cm) {
        if (!(l > 0.0) || !std::isfinite(l)) throw ProfileError("link lengths must be positive");
    }
    for (std::size_t j = 0; j < kJointCount; ++j) {
        const auto& r = joint_ranges[j];
        if (!(r.min_deg < r.max_deg) || !std::isfinite(r.min_deg) || !std::isfinite(r.max_deg)) {
            throw ProfileError("degenerate range for joint " + std::string(kJointNames[j]));
        }
        if (!(servo_s_per_60deg[j] > 0.0) || !std::isfinite(servo_s_per_60deg[j])) {
            throw ProfileError("servo speed must be positive for joint " + std::string(kJointNames[j]));
        }
    }
    if (!(gripper_min_mm < gripper_max_mm)) throw ProfileError("degenerate gripper range");
    if (!(shoulder_stall_torque_kgfcm > 0.0)) throw ProfileError("stall torque must be positive");
    for (const auto& m : mass_points) {
        if (!(m.mass_g >= 0.0)) throw ProfileError("masses must be non-negative");
        if (m.joint < 0 || m.joint > 3) throw ProfileError("mass point joint index must be 0..3");
        if (!std::isfinite(m.offset_cm)) throw ProfileError("mass point offset must be finite");
    }
}

bool within_limits(const JointConfig& q, const ArmProfile& p) {
    for (std::size_t j = 0; j < kJointCount; ++j) {
        const auto& r = p.joint_ranges[j];
        if (!(q.angles_deg[j] >= r.min_deg && q.angles_deg[j] <= r.max_deg)) return false;
    }
    return q.gripper_mm >= p.gripper_min_mm && q.gripper_mm <= p.gripper_max_mm;
}

std::array<double, 4> chain_radial_cm(const JointConfig& q, const ArmProfile& p) {
    require_finite(q);
    const auto phi = link_pitches_rad(q);
    std::array<double, 4> r{};
    for (std::size_t k = 0; k < 3; ++k) r[k + 1] = r[k] + p.link_lengths_cm[k] * std::sin(phi[k]);
    return r;
}

CartesianPose forward_kinematics(const JointConfig& q, const ArmProfile& p) {
    require_finite(q);
    const auto phi = link_pitches_rad(q);
    const auto& l = p.link_lengths_cm;
    const double r = l[0] * std::sin(phi[0]) + l[1] * std::sin(phi[1]) + l[2] * std::sin(phi[2]);
    const double z = l[0] * std::cos(phi[0]) + l[1] * std::cos(phi[1]) + l[2] * std::cos(phi[2]);
    const double yaw = q.angle(Joint::base) * kDegToRad;
    return CartesianPose{r * std::cos(yaw), r * std::sin(yaw), z, q.angle(Joint::wrist_roll),
                         q.gripper_mm};
}

MotionPlan plan_motion(const JointConfig& start, const JointConfig& target, const ArmProfile& p) {
    require_finite(start);
    require_finite(target);
    if (!within_limits(start, p)) throw LimitError("start configuration outside joint limits");
    if (!within_limits(target, p)) throw LimitError("target configuration outside joint limits");

    MotionPlan plan{start, target, 0.0, {}};
    for (std::size_t j = 0; j < kJointCount; ++j) {
        const double delta = std::abs(target.angles_deg[j] - start.angles_deg[j]);
        // (|d|/60)*speed keeps a 60 deg move at exactly the rated time.
        plan.duration_s = std::max(plan.duration_s, delta / 60.0 * p.servo_s_per_60deg[j]);
    }
    if (plan.duration_s > 0.0) {
        for (std::size_t j = 0; j < kJointCount; ++j) {
            plan.rate_deg_per_s[j] =
                std::abs(target.angles_deg[j] - start.angles_deg[j]) / plan.duration_s;
        }
    }
    return plan;
}

JointConfig config_at(const MotionPlan& plan, double t_s) {
    if (!(t_s >= 0.0)) throw DomainError("sample time must be non-negative");
    if (t_s >= plan.duration_s) return plan.target;
    if (t_s == 0.0) return plan.start;
    const double f = t_s / plan.duration_s;
    JointConfig q;
    for (std::size_t j = 0; j < kJointCount; ++j) {
        q.angles_deg[j] =
            plan.start.angles_deg[j] + (plan.target.angles_deg[j] - plan.start.angles_deg[j]) * f;
    }
    q.gripper_mm = plan.start.gripper_mm + (plan.target.gripper_mm - plan.start.gripper_mm) * f;
    return q;
}

double shoulder_torque(const JointConfig& q, double payload_g, const ArmProfile& p) {
    const auto radial = chain_radial_cm(q, p);
    const auto phi = link_pitches_rad(q);
    double moment_gcm = 0.0;
    for (const auto& m : p.mass_points) {
        // offsets run along the link leaving the attachment point; the
        // end effector continues along the last link
        const double dir = std::sin(phi[std::min(m.joint, 2)]);
        moment_gcm += m.mass_g * (radial[static_cast<std::size_t>(m.joint)] + m.offset_cm * dir);
    }
    moment_gcm += payload_g * radial[3];
    return moment_gcm / 1000.0;
}

bool is_liftable(const JointConfig& q, double payload_g, const ArmProfile& p) {
    return std::abs(shoulder_torque(q, payload_g, p)) <= p.shoulder_stall_torque_kgfcm;
}

// ---------------------------------------------------------------------------
// Profile text format

namespace {

std::vector<double> parse_numbers(std::string_view key, std::string_view value, std::size_t n,
                                  std::size_t line_no) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < value.size()) {
        while (pos < value.size() && (value[pos] == ' ' || value[pos] == '\t')) ++pos;
        if (pos >= value.size()) break;
        double v = 0;
        auto [ptr, ec] = std::from_chars(value.data() + pos, value.data() + value.size(), v);
        if (ec != std::errc{}) {
            throw ProfileError("line " + std::to_string(line_no) + ": bad number for '" +
                               std::string(key) + "'");
        }
        out.push_back(v);
        pos = static_cast<std::size_t>(ptr - value.data());
    }
    if (out.size() != n) {
        throw ProfileError("line " + std::to_string(line_no) + ": '" + std::string(key) +
                           "' expects " + std::to_string(n) + " value(s)");
    }
    return out;
}

std::size_t joint_index(std::string_view name, std::size_t line_no) {
    for (std::size_t j = 0; j < kJointCount; ++j) {
        if (kJointNames[j] == name) return j;
    }
    throw ProfileError("line " + std::to_string(line_no) + ": unknown joint '" + std::string(name) +
                       "'");
}

}  // namespace

ArmProfile parse_profile(std::string_view text) {
    ArmProfile p;
    bool masses_reset = false;
    std::size_t line_no = 0;
    for (auto raw : detail::split(text, '\n')) {
        ++line_no;
        auto hash = raw.find('#');
        auto line = detail::trim(raw.substr(0, hash));
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ProfileError("line " + std::to_string(line_no) + ": expected key = value");
        }
        auto key = detail::trim(line.substr(0, eq));
        auto value = detail::trim(line.substr(eq + 1));

        if (key == "link_lengths_cm") {
            auto v = parse_numbers(key, value, 3, line_no);
            std::copy(v.begin(), v.end(), p.link_lengths_cm.begin());
        } else if (key.starts_with("range.")) {
            auto j = joint_index(key.substr(6), line_no);
            auto v = parse_numbers(key, value, 2, line_no);
            p.joint_ranges[j] = JointRange{v[0], v[1]};
        } else if (key.starts_with("speed_s_per_60deg.")) {
            auto j = joint_index(key.substr(18), line_no);
            p.servo_s_per_60deg[j] = parse_numbers(key, value, 1, line_no)[0];
        } else if (key == "shoulder_stall_torque_kgfcm") {
            p.shoulder_stall_torque_kgfcm = parse_numbers(key, value, 1, line_no)[0];
        } else if (key == "gripper_range_mm") {
            auto v = parse_numbers(key, value, 2, line_no);
            p.gripper_min_mm = v[0];
            p.gripper_max_mm = v[1];
        } else if (key == "mass") {
            // First `mass` line replaces the built-in mass points.
            if (!masses_reset) {
                p.mass_points.clear();
                masses_reset = true;
            }
            auto v = parse_numbers(key, value, 3, line_no);
            if (v[1] != std::floor(v[1])) {
                throw ProfileError("line " + std::to_string(line_no) + ": joint index must be an integer");
            }
            p.mass_points.push_back(MassPoint{v[0], static_cast<int>(v[1]), v[2]});
        } else if (key == "masses" && value == "none") {
            p.mass_points.clear();
            masses_reset = true;
        } else {
            throw ProfileError("line " + std::to_string(line_no) + ": unknown key '" +
                               std::string(key) + "'");
        }
    }
    p.check();
    return p;
}

ArmProfile load_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ProfileError("cannot open profile '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_profile(ss.str());
}

std::string dump_profile(const ArmProfile& p) {
    using detail::format_shortest;
    std::string out = "# arm profile\n";
    out += "link_lengths_cm = " + format_shortest(p.link_lengths_cm[0]) + " " +
           format_shortest(p.link_lengths_cm[1]) + " " + format_shortest(p.link_lengths_cm[2]) + "\n";
    for (std::size_t j = 0; j < kJointCount; ++j) {
        out += "range." + std::string(kJointNames[j]) + " = " +
               format_shortest(p.joint_ranges[j].min_deg) + " " +
               format_shortest(p.joint_ranges[j].max_deg) + "\n";
    }
    for (std::size_t j = 0; j < kJointCount; ++j) {
        out += "speed_s_per_60deg." + std::string(kJointNames[j]) + " = " +
               format_shortest(p.servo_s_per_60deg[j]) + "\n";
    }
    out += "shoulder_stall_torque_kgfcm = " + format_shortest(p.shoulder_stall_torque_kgfcm) + "\n";
    out += "gripper_range_mm = " + format_shortest(p.gripper_min_mm) + " " +
           format_shortest(p.gripper_max_mm) + "\n";
    if (p.mass_points.empty()) out += "masses = none\n";
    for (const auto& m : p.mass_points) {
        out += "mass = " + format_shortest(m.mass_g) + " " + std::to_string(m.joint) + " " +
               format_shortest(m.offset_cm) + "\n";
    }
    return out;
}

}  // namespace iort::arm
