#pragma once

#include <cstdint>
#include <vector>

#include "pctgan/common.hpp"

namespace pctgan::labels {

// Placement of the two active coordinates of a timing label.
//
// `continuity` puts (S-s)/S at dimension n-1 and s/S at dimension n, which
// makes the label of the last step of sub-sequence n exactly equal the label
// of the first step of sub-sequence n+1. `literal` is the reversed placement,
// kept for fidelity experiments; it is discontinuous across boundaries.
enum class TimingOrientation { continuity, literal };

struct TimingLabel {
    std::vector<double> values;  // N+1 entries, sum to 1
    int n = 1;                   // sub-sequence index, 1-based
    std::int64_t s = 0;          // step within the sub-sequence
    std::int64_t steps = 1;      // S

    std::size_t dims() const { return values.size(); }
};

TimingLabel make_timing_label(int n, std::int64_t s, std::int64_t steps, int sub_sequences,
                              TimingOrientation orientation = TimingOrientation::continuity);

struct ChannelLabel {
    std::vector<std::uint8_t> mask;  // n_ch binary entries

    int popcount() const {
        int c = 0;
        for (auto m : mask) c += m;
        return c;
    }
};

// selected holds 1-based channel indices, no duplicates.
ChannelLabel make_channel_label(const std::vector<int>& selected, int n_ch);

}  // namespace pctgan::labels
