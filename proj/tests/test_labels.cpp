#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pctgan/labels.hpp"

using namespace pctgan;
using labels::make_channel_label;
using labels::make_timing_label;
using labels::TimingOrientation;

TEST_CASE("timing label: interior step of a middle sub-sequence") {
    auto t = make_timing_label(2, 3, 10, 3);
    REQUIRE(t.values.size() == 4);
    CHECK(t.values[0] == 0.0);
    CHECK(t.values[1] == doctest::Approx(0.7));
    CHECK(t.values[2] == doctest::Approx(0.3));
    CHECK(t.values[3] == 0.0);
}

TEST_CASE("timing label: start of the first sub-sequence") {
    auto t = make_timing_label(1, 0, 17, 3);
    CHECK(t.values == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("timing label: boundary continuity is exact") {
    for (int n = 1; n < 3; ++n) {
        auto end = make_timing_label(n, 25, 25, 3);
        auto start = make_timing_label(n + 1, 0, 13, 3);
        CHECK(end.values == start.values);  // bitwise
    }
}

TEST_CASE("timing label: literal orientation reverses the two active entries") {
    auto cont = make_timing_label(2, 3, 10, 3, TimingOrientation::continuity);
    auto lit = make_timing_label(2, 3, 10, 3, TimingOrientation::literal);
    CHECK(lit.values[1] == doctest::Approx(cont.values[2]));
    CHECK(lit.values[2] == doctest::Approx(cont.values[1]));
    // the literal placement breaks boundary continuity
    auto end = make_timing_label(1, 10, 10, 3, TimingOrientation::literal);
    auto start = make_timing_label(2, 0, 10, 3, TimingOrientation::literal);
    CHECK(end.values != start.values);
}

TEST_CASE("timing label: exhaustive invariants for N <= 4, S <= 50") {
    for (int N = 1; N <= 4; ++N) {
        for (std::int64_t S = 1; S <= 50; ++S) {
            for (int n = 1; n <= N; ++n) {
                for (std::int64_t s = 0; s <= S; ++s) {
                    auto t = make_timing_label(n, s, S, N);
                    REQUIRE(t.values.size() == static_cast<std::size_t>(N) + 1);
                    double sum = 0.0;
                    int nonzero = 0;
                    for (auto v : t.values) {
                        REQUIRE(v >= 0.0);
                        REQUIRE(v <= 1.0);
                        sum += v;
                        if (v != 0.0) ++nonzero;
                    }
                    REQUIRE(std::abs(sum - 1.0) <= 1e-6);
                    REQUIRE(nonzero <= 2);
                    if (nonzero == 2) {
                        REQUIRE(t.values[static_cast<std::size_t>(n) - 1] != 0.0);
                        REQUIRE(t.values[static_cast<std::size_t>(n)] != 0.0);
                    }
                    if (s > 0) {
                        auto prev = make_timing_label(n, s - 1, S, N);
                        const double step = 1.0 / static_cast<double>(S);
                        REQUIRE(std::abs((prev.values[static_cast<std::size_t>(n) - 1] -
                                          t.values[static_cast<std::size_t>(n) - 1]) -
                                         step) <= 1e-12);
                        REQUIRE(std::abs((t.values[static_cast<std::size_t>(n)] -
                                          prev.values[static_cast<std::size_t>(n)]) -
                                         step) <= 1e-12);
                    }
                }
                // exact boundary continuity against every other S'
                if (n < N) {
                    auto end = make_timing_label(n, S, S, N);
                    auto start = make_timing_label(n + 1, 0, std::max<std::int64_t>(1, S / 2 + 1), N);
                    REQUIRE(end.values == start.values);
                }
            }
        }
    }
}

TEST_CASE("timing label: range validation") {
    CHECK_THROWS_AS(make_timing_label(0, 0, 10, 3), Error);
    CHECK_THROWS_AS(make_timing_label(4, 0, 10, 3), Error);
    CHECK_THROWS_AS(make_timing_label(1, -1, 10, 3), Error);
    CHECK_THROWS_AS(make_timing_label(1, 11, 10, 3), Error);
    CHECK_THROWS_AS(make_timing_label(1, 0, 0, 3), Error);
}

TEST_CASE("channel label: selections") {
    auto l = make_channel_label({1, 3}, 5);
    CHECK(l.mask == std::vector<std::uint8_t>{1, 0, 1, 0, 0});
    CHECK(l.popcount() == 2);

    auto all = make_channel_label({1, 2, 3, 4, 5}, 5);
    CHECK(all.popcount() == 5);

    CHECK_THROWS_AS(make_channel_label({}, 5), Error);
    CHECK_THROWS_AS(make_channel_label({0}, 5), Error);
    CHECK_THROWS_AS(make_channel_label({6}, 5), Error);
    CHECK_THROWS_AS(make_channel_label({2, 2}, 5), Error);
}
