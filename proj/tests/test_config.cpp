// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "ovd/config.hpp"
#include "ovd/error.hpp"

using namespace ovd;

namespace {

template <class F>
Error error_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e;
    }
    return Error(ErrorKind::io, "no error");
}

}  // namespace

TEST(Config, DefaultsValidate) {
    const RunConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.model.n_layers, 6u);
    EXPECT_EQ(c.dropping.beta, 0.5);
    EXPECT_EQ(c.generate.max_len, 32u);
    EXPECT_EQ(c.stream.w, 1.0);
}

TEST(Config, DumpParseRoundTrip) {
    RunConfig c;
    apply_overrides(c, {"model.d_model=32", "dropping.policy=deep", "data.noise=0.125",
                        "metrics.unmatched_penalty=2"});
    const RunConfig back = RunConfig::parse(c.dump());
    EXPECT_EQ(back.dump(), c.dump());
    EXPECT_EQ(back.hash(), c.hash());
    EXPECT_NE(c.hash(), RunConfig().hash());
}

TEST(Config, EveryKeyRoundTripsThroughItsText) {
    RunConfig c;
    for (const auto& key : RunConfig::keys()) {
        const std::string v = c.get(key);
        c.set(key, v);
        EXPECT_EQ(c.get(key), v) << key;
    }
    EXPECT_EQ(c.dump(), RunConfig().dump());
}

TEST(Config, UnknownKeysAndBadValuesAreConfigErrors) {
    RunConfig c;
    EXPECT_EQ(error_of([&] { c.set("model.width", "3"); }).kind(), ErrorKind::config);
    EXPECT_EQ(error_of([&] { c.set("model.d_model", "abc"); }).kind(), ErrorKind::config);
    EXPECT_EQ(error_of([&] { c.set("slow_path.box", "maybe"); }).kind(), ErrorKind::config);
    EXPECT_EQ(error_of([&] { apply_overrides(c, {"no_equals_sign"}); }).kind(), ErrorKind::config);
    const Error e = error_of([] { RunConfig::parse("model.n_layers = 6\nbogus.key = 1\n", "x.cfg"); });
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos) << e.what();
}

TEST(Config, ValidationRejectsOutOfRangeValues) {
    for (const char* bad : {"data.event_rate=-1", "dropping.beta=1", "dropping.beta=-0.1",
                            "stream.respond_threshold=1.5", "model.n_heads=5", "train.batch=0"}) {
        RunConfig c;
        EXPECT_EQ(error_of([&] {
                      apply_overrides(c, {bad});
                      c.validate();
                  }).kind(),
                  ErrorKind::config)
            << bad;
    }
}

TEST(Config, CommentsAndBlankLinesAreIgnored) {
    const RunConfig c = RunConfig::parse("# toy run\n\nmodel.n_layers = 4  # shallower\n");
    EXPECT_EQ(c.model.n_layers, 4u);
}
