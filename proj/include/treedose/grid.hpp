#pragma once

#include <vector>

#include "treedose/error.hpp"

namespace treedose {

// Ordered evaluation grid for one exposure axis (dose in ug/ml or time in
// hours). Values must be strictly increasing with at least two entries.
struct Grid1D {
    std::vector<double> values;

    Grid1D() = default;
    explicit Grid1D(std::vector<double> v) : values(std::move(v)) { validate(); }

    int size() const { return static_cast<int>(values.size()); }
    double min() const { return values.front(); }
    double max() const { return values.back(); }

    void validate() const {
        if (values.size() < 2) throw ValidationError("grid needs at least 2 points");
        for (std::size_t i = 1; i < values.size(); ++i)
            if (!(values[i] > values[i - 1]))
                throw ValidationError("grid values must be strictly increasing");
    }
};

}  // namespace treedose
