#include "avarc/types.hpp"

#include "avarc/error.hpp"

namespace avarc {

MultiScaleTokenMap::MultiScaleTokenMap(ScaleSchedule s) : schedule(std::move(s)) {
    for (int k = 0; k < schedule.num_scales(); ++k)
        maps.emplace_back(static_cast<std::size_t>(schedule.tokens_in_scale(k)), 0);
}

std::vector<int> MultiScaleTokenMap::flatten(int num_scales) const {
    if (num_scales < 0 || num_scales > static_cast<int>(maps.size())) throw ParameterError("scale count out of range");
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(schedule.prefix_tokens(num_scales)));
    for (int k = 0; k < num_scales; ++k) out.insert(out.end(), maps[static_cast<std::size_t>(k)].begin(), maps[static_cast<std::size_t>(k)].end());
    return out;
}

void MultiScaleTokenMap::validate(int vocab) const {
    if (static_cast<int>(maps.size()) != schedule.num_scales()) throw ShapeError("token map has wrong number of scales");
    for (int k = 0; k < schedule.num_scales(); ++k) {
        const auto& m = maps[static_cast<std::size_t>(k)];
        if (static_cast<int>(m.size()) != schedule.tokens_in_scale(k)) throw ShapeError("token grid does not match schedule");
        for (int id : m)
            if (id < 0 || id >= vocab) throw InvalidTokenError("token id " + std::to_string(id) + " outside [0, vocab)");
    }
}

double ScaleGrids::sum() const {
    double s = 0.0;
    for (const auto& g : grids)
        for (double v : g) s += v;
    return s;
}

std::size_t ScaleGrids::count() const {
    std::size_t n = 0;
    for (const auto& g : grids) n += g.size();
    return n;
}

}  // namespace avarc
