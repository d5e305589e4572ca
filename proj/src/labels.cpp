#include "pctgan/labels.hpp"

#include <algorithm>
#include <string>

namespace pctgan::labels {

TimingLabel make_timing_label(int n, std::int64_t s, std::int64_t steps, int sub_sequences,
                              TimingOrientation orientation) {
    if (sub_sequences < 1) throw_invalid("make_timing_label: need at least one sub-sequence");
    if (n < 1 || n > sub_sequences)
        throw_invalid("make_timing_label: sub-sequence index " + std::to_string(n) + " outside (0, " +
                      std::to_string(sub_sequences) + "]");
    if (steps < 1) throw_invalid("make_timing_label: steps must be >= 1");
    if (s < 0 || s > steps)
        throw_invalid("make_timing_label: step " + std::to_string(s) + " outside [0, " +
                      std::to_string(steps) + "]");

    TimingLabel label;
    label.values.assign(static_cast<std::size_t>(sub_sequences) + 1, 0.0);
    label.n = n;
    label.s = s;
    label.steps = steps;
    const double frac = static_cast<double>(s) / static_cast<double>(steps);
    if (orientation == TimingOrientation::continuity) {
        label.values[static_cast<std::size_t>(n) - 1] = 1.0 - frac;
        label.values[static_cast<std::size_t>(n)] = frac;
    } else {
        label.values[static_cast<std::size_t>(n) - 1] = frac;
        label.values[static_cast<std::size_t>(n)] = 1.0 - frac;
    }
    return label;
}

ChannelLabel make_channel_label(const std::vector<int>& selected, int n_ch) {
    if (n_ch < 1) throw_invalid("make_channel_label: channel count must be positive");
    if (selected.empty()) throw_invalid("make_channel_label: selection must be nonempty");
    ChannelLabel label;
    label.mask.assign(static_cast<std::size_t>(n_ch), 0);
    for (int ch : selected) {
        if (ch < 1 || ch > n_ch)
            throw_invalid("make_channel_label: channel " + std::to_string(ch) + " outside [1, " +
                          std::to_string(n_ch) + "]");
        auto& slot = label.mask[static_cast<std::size_t>(ch) - 1];
        if (slot) throw_invalid("make_channel_label: duplicate channel " + std::to_string(ch));
        slot = 1;
    }
    return label;
}

}  // namespace pctgan::labels
