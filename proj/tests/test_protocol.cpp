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
#include <random>
#include <regex>

#include <rapidjson/document.h>

#include "iort/protocol.hpp"

using namespace iort::protocol;

namespace {

std::string random_text(std::mt19937_64& rng) {
    static const std::string alphabet = "abcXYZ019 _-.\"\\/\t\n\x01\xc3\xa9";
    std::uniform_int_distribution<std::size_t> len(0, 12), pick(0, alphabet.size() - 1);
    std::string s;
    for (auto n = len(rng); n > 0; --n) {
        char c = alphabet[pick(rng)];
        if (c == '\xc3') {
            s += "\xc3\xa9";
        } else if (c != '\xa9') {
            s += c;
        }
    }
    return s;
}

double random_number(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> kind(0, 3);
    std::uniform_real_distribution<double> any(-1000.0, 1000.0);
    switch (kind(rng)) {
        case 0:
            return std::round(any(rng));
        case 1:
            return std::round(any(rng) * 1e6) / 1e6;
        case 2:
            return any(rng) * 1e-7;
        default:
            return any(rng);
    }
}

JointCommand random_command(std::mt19937_64& rng) {
    JointCommand c;
    c.id = random_text(rng);
    c.arm_id = random_text(rng);
    c.operator_id = random_text(rng);
    c.base_deg = random_number(rng);
    c.shoulder_deg = random_number(rng);
    c.elbow_deg = random_number(rng);
    c.wrist_pitch_deg = random_number(rng);
    c.wrist_roll_deg = random_number(rng);
    c.gripper_mm = random_number(rng);
    c.issued_at_ms = std::uniform_int_distribution<std::int64_t>(0, 1LL << 50)(rng);
    return c;
}

Ack random_ack(std::mt19937_64& rng) {
    Ack a;
    a.command_id = random_text(rng);
    a.status = static_cast<AckStatus>(std::uniform_int_distribution<int>(0, 2)(rng));
    if (a.status == AckStatus::ok) {
        a.final_pose = iort::arm::CartesianPose{random_number(rng), random_number(rng), random_number(rng),
                                                random_number(rng), random_number(rng)};
        a.detail = random_text(rng);
    } else {
        a.detail = "x" + random_text(rng);
    }
    a.completed_at_ms = std::uniform_int_distribution<std::int64_t>(0, 1LL << 50)(rng);
    return a;
}

Body random_body(std::mt19937_64& rng) {
    switch (std::uniform_int_distribution<int>(0, 6)(rng)) {
        case 0:
            return random_command(rng);
        case 1:
            return random_ack(rng);
        case 2: {
            Notification n;
            n.event = random_text(rng);
            if (rng() & 1) n.topic = random_text(rng);
            if (rng() & 1) n.queue = random_text(rng);
            if (rng() & 1) n.record_id = rng();
            if (rng() & 1) n.lease_ms = static_cast<std::int64_t>(rng() >> 2);
            if (rng() & 1) n.violations.push_back(Violation{"elbow_deg", random_number(rng), -60, 60});
            if (rng() & 1) n.command = random_command(rng);
            if (rng() & 1) n.ack = random_ack(rng);
            return n;
        }
        case 3: {
            PatternPrompt p{random_text(rng), random_text(rng), 1 + static_cast<std::uint32_t>(rng() % 5), {}};
            for (int i = 1 + static_cast<int>(rng() % 3); i > 0; --i) p.remainder.push_back(random_command(rng));
            return p;
        }
        case 4:
            return PatternResponse{random_text(rng), (rng() & 1) != 0};
        case 5: {
            Subscribe s;
            for (int i = static_cast<int>(rng() % 4); i > 0; --i) s.topics.push_back(random_text(rng));
            return s;
        }
        default:
            return Register{(rng() & 1) ? ClientKind::robot : ClientKind::operator_, "id" + random_text(rng)};
    }
}

// Independent view of the encoded command through rapidjson.
void check_command_fields(const rapidjson::Value& o, const JointCommand& c) {
    REQUIRE(o.IsObject());
    const char* keys[] = {"id",      "arm_id",          "operator_id",    "base_deg",   "shoulder_deg",
                          "elbow_deg", "wrist_pitch_deg", "wrist_roll_deg", "gripper_mm", "issued_at_ms"};
    int i = 0;
    for (auto it = o.MemberBegin(); it != o.MemberEnd(); ++it, ++i) {
        REQUIRE(i < 10);
        CHECK(std::string(it->name.GetString()) == keys[i]);
    }
    CHECK(i == 10);
    CHECK(std::string(o["id"].GetString(), o["id"].GetStringLength()) == c.id);
    CHECK(std::string(o["arm_id"].GetString(), o["arm_id"].GetStringLength()) == c.arm_id);
    const double vals[] = {c.base_deg, c.shoulder_deg, c.elbow_deg, c.wrist_pitch_deg, c.wrist_roll_deg,
                           c.gripper_mm};
    for (int k = 0; k < 6; ++k) {
        CHECK(std::abs(o[keys[3 + k]].GetDouble() - vals[k]) <= 5.000001e-7 * std::max(1.0, std::abs(vals[k]) * 1e-9));
    }
    CHECK(o["issued_at_ms"].GetInt64() == c.issued_at_ms);
}

}  // namespace

TEST_CASE("envelope key order and framing") {
    JointCommand c{"c1", "arm-1", "op", 10, -20.5, 0.25, 0, 90, 50.8, 1234};
    const auto line = encode(Envelope{1, 7, c});
    CHECK(line ==
          R"({"v":1,"type":"command","seq":7,"body":{"id":"c1","arm_id":"arm-1","operator_id":"op",)"
          R"("base_deg":10,"shoulder_deg":-20.5,"elbow_deg":0.25,"wrist_pitch_deg":0,"wrist_roll_deg":90,)"
          R"("gripper_mm":50.8,"issued_at_ms":1234}})"
          "\n");
    CHECK(std::count(line.begin(), line.end(), '\n') == 1);
    CHECK(decode(line) == Envelope{1, 7, c});
}

TEST_CASE("numbers carry at most six fractional digits") {
    JointCommand c;
    c.base_deg = 0.1 + 0.2;
    c.shoulder_deg = -0.0;
    c.elbow_deg = 1e-7;
    c.wrist_pitch_deg = -1e-7;
    c.wrist_roll_deg = 1.0 / 3.0;
    c.gripper_mm = 123456.0000004;
    const auto body = encode_command(c);
    CHECK(body.find(R"("base_deg":0.3,)") != std::string::npos);
    CHECK(body.find(R"("shoulder_deg":0,)") != std::string::npos);
    CHECK(body.find(R"("elbow_deg":0,)") != std::string::npos);
    CHECK(body.find(R"("wrist_pitch_deg":0,)") != std::string::npos);
    CHECK(body.find(R"("wrist_roll_deg":0.333333,)") != std::string::npos);
    CHECK(body.find(R"("gripper_mm":123456,)") != std::string::npos);
    CHECK_FALSE(std::regex_search(body, std::regex("[0-9][eE]")));
}

TEST_CASE("round trip property over random messages") {
    std::mt19937_64 rng(2026);
    for (int i = 0; i < 10000; ++i) {
        Envelope env{1, rng() >> 1, random_body(rng)};
        const auto line = encode(env);
        REQUIRE(line.back() == '\n');
        REQUIRE(line.find('\n') == line.size() - 1);
        const auto back = decode(line);
        CHECK(back.type() == env.type());
        CHECK(back.seq == env.seq);
        // canonical form is a fixed point
        CHECK(encode(back) == line);

        rapidjson::Document doc;
        doc.Parse(line.c_str(), line.size());
        REQUIRE_FALSE(doc.HasParseError());
        auto m = doc.MemberBegin();
        CHECK(std::string(m->name.GetString()) == "v");
        ++m;
        CHECK(std::string(m->name.GetString()) == "type");
        CHECK(std::string(m->value.GetString()) == to_string(env.type()));
        ++m;
        CHECK(std::string(m->name.GetString()) == "seq");
        CHECK(m->value.GetUint64() == env.seq);
        ++m;
        CHECK(std::string(m->name.GetString()) == "body");
        if (const auto* c = std::get_if<JointCommand>(&env.body)) check_command_fields(doc["body"], *c);
        if (const auto* p = std::get_if<PatternPrompt>(&env.body)) {
            REQUIRE(doc["body"]["remainder"].Size() == p->remainder.size());
            for (rapidjson::SizeType k = 0; k < p->remainder.size(); ++k) {
                check_command_fields(doc["body"]["remainder"][k], p->remainder[k]);
            }
        }
    }
}

TEST_CASE("exact round trip for six-digit values") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::int64_t> micro(-360'000'000, 360'000'000);
    for (int i = 0; i < 2000; ++i) {
        JointCommand c{"id", "a", "o", 0, 0, 0, 0, 0, 0, 0};
        c.base_deg = static_cast<double>(micro(rng)) / 1e6;
        c.gripper_mm = static_cast<double>(micro(rng)) / 1e6;
        CHECK(decode(encode(Envelope{1, 1, c})) == Envelope{1, 1, c});
    }
}

TEST_CASE("decode errors are typed") {
    CHECK_THROWS_AS(decode("not json"), ParseError);
    CHECK_THROWS_AS(decode("[1,2]"), ParseError);
    CHECK_THROWS_AS(decode(""), ParseError);
    CHECK_THROWS_AS(decode(R"({"v":2,"type":"subscribe","seq":1,"body":{"topics":[]}})"), VersionError);
    try {
        decode(R"({"v":7,"type":"subscribe","seq":1,"body":{"topics":[]}})");
        FAIL("expected VersionError");
    } catch (const VersionError& e) {
        CHECK(e.version() == 7);
    }
    auto field_of = [](const char* line) {
        try {
            decode(line);
        } catch (const SchemaError& e) {
            return e.field();
        }
        return std::string("<none>");
    };
    CHECK(field_of(R"({"type":"subscribe","seq":1,"body":{"topics":[]}})") == "v");
    CHECK(field_of(R"({"v":1,"type":"teleport","seq":1,"body":{}})") == "type");
    CHECK(field_of(R"({"v":1,"type":"subscribe","seq":-1,"body":{"topics":[]}})") == "seq");
    CHECK(field_of(R"({"v":1,"type":"subscribe","seq":1})") == "body");
    CHECK(field_of(R"({"v":1,"type":"command","seq":1,"body":{"id":"x","arm_id":"a","operator_id":"o",)"
                   R"("base_deg":"ten","shoulder_deg":0,"elbow_deg":0,"wrist_pitch_deg":0,"wrist_roll_deg":0,)"
                   R"("gripper_mm":0,"issued_at_ms":0}})") == "base_deg");
    CHECK(field_of(R"({"v":1,"type":"ack","seq":1,"body":{"command_id":"x","status":"ok","detail":"",)"
                   R"("completed_at_ms":1}})") == "final_pose");
    CHECK(field_of(R"({"v":1,"type":"ack","seq":1,"body":{"command_id":"x","status":"meh","detail":"",)"
                   R"("completed_at_ms":1}})") == "status");
    CHECK(field_of(R"({"v":1,"type":"register","seq":1,"body":{"kind":"robot","id":""}})") == "id");
    CHECK(field_of(R"({"v":1,"type":"pattern_prompt","seq":1,"body":{"pattern_id":"p","arm_id":"a",)"
                   R"("matched_prefix_len":2,"remainder":[]}})") == "remainder");
}

TEST_CASE("encoder refuses what it cannot represent") {
    JointCommand c;
    c.elbow_deg = std::nan("");
    CHECK_THROWS_AS(encode(Envelope{1, 1, c}), EncodeError);
    c.elbow_deg = INFINITY;
    CHECK_THROWS_AS(encode_command(c), EncodeError);
    Ack bad{"x", AckStatus::ok, std::nullopt, "", 0};
    CHECK_THROWS_AS(encode(Envelope{1, 1, bad}), EncodeError);
    Ack bad2{"x", AckStatus::fault, std::nullopt, "", 0};
    CHECK_THROWS_AS(encode_ack(bad2), EncodeError);
    CHECK_THROWS_AS(encode(Envelope{1, 1, PatternPrompt{"p", "a", 1, {}}}), EncodeError);
}

TEST_CASE("lenient command bodies") {
    const auto c = decode_command(R"({"arm_id":"a","base_deg":1,"shoulder_deg":2,"elbow_deg":3,)"
                                  R"("wrist_pitch_deg":4,"wrist_roll_deg":5,"gripper_mm":6})",
                                  true);
    CHECK(c.id.empty());
    CHECK(c.arm_id == "a");
    CHECK(c.gripper_mm == 6);
    CHECK_THROWS_AS(decode_command(R"({"arm_id":"a"})", true), SchemaError);
    CHECK(decode_command(R"({"base_deg":1,"shoulder_deg":2,"elbow_deg":3,"wrist_pitch_deg":4,)"
                         R"("wrist_roll_deg":5,"gripper_mm":6})",
                         true)
              .arm_id.empty());
    CHECK_THROWS_AS(decode_command(R"({"arm_id":"a","base_deg":1,"shoulder_deg":2,"elbow_deg":3,)"
                                   R"("wrist_pitch_deg":4,"wrist_roll_deg":5,"gripper_mm":6})",
                                   false),
                    SchemaError);
}

TEST_CASE("validation reports every violated field") {
    const iort::arm::ArmProfile p;
    JointCommand c;
    CHECK(validate_command(c, p).ok());
    c.base_deg = 61;
    c.elbow_deg = -60.5;
    c.wrist_roll_deg = 75;
    c.gripper_mm = 50.9;
    const auto r = validate_command(c, p);
    REQUIRE(r.violations.size() == 3);
    CHECK(r.violations[0] == Violation{"base_deg", 61, -60, 60});
    CHECK(r.violations[1] == Violation{"elbow_deg", -60.5, -60, 60});
    CHECK(r.violations[2] == Violation{"gripper_mm", 50.9, 0, 50.8});
    c = JointCommand{};
    c.shoulder_deg = std::nan("");
    CHECK(validate_command(c, p).violations.at(0).field == "shoulder_deg");
}

TEST_CASE("joint-limit gate at the exact boundaries") {
    const iort::arm::ArmProfile p;
    const char* fields[] = {"base_deg", "shoulder_deg", "elbow_deg", "wrist_pitch_deg"};
    for (std::size_t j = 0; j < 4; ++j) {
        for (double edge : {-60.0, 60.0}) {
            iort::arm::JointConfig q;
            q.angles_deg[j] = edge;
            JointCommand c;
            c.set_config(q);
            CHECK(validate_command(c, p).ok());
            q.angles_deg[j] = std::nextafter(edge, edge * 2);
            c.set_config(q);
            const auto r = validate_command(c, p);
            REQUIRE(r.violations.size() == 1);
            CHECK(r.violations[0].field == fields[j]);
        }
    }
}

TEST_CASE("sequence numbers strictly increase") {
    SeqTracker t;
    t.check(0);
    t.check(5);
    CHECK_THROWS_AS(t.check(5), SchemaError);
    CHECK_THROWS_AS(t.check(4), SchemaError);
    t.check(6);
    CHECK(t.next_outgoing() == 1);
    CHECK(t.next_outgoing() == 2);
}
