#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "common.hpp"

namespace icreg {

struct Landmark {
    std::string id;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    friend bool operator==(const Landmark&, const Landmark&) = default;
};

/// Identified points in continuous voxel coordinates. Ids are unique.
class LandmarkSet {
public:
    LandmarkSet() = default;
    explicit LandmarkSet(std::vector<Landmark> points) : points_(std::move(points)) { validate(); }

    void add(Landmark p)
    {
        for (const auto& q : points_)
            if (q.id == p.id)
                throw Error("LandmarkSet: duplicate id '" + p.id + "'");
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
            throw Error("LandmarkSet: non-finite coordinate for id '" + p.id + "'");
        points_.push_back(std::move(p));
    }

    std::size_t size() const { return points_.size(); }
    bool empty() const { return points_.empty(); }
    const std::vector<Landmark>& points() const { return points_; }
    auto begin() const { return points_.begin(); }
    auto end() const { return points_.end(); }

    const Landmark* find(const std::string& id) const
    {
        for (const auto& p : points_)
            if (p.id == id)
                return &p;
        return nullptr;
    }

    friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;

private:
    void validate() const
    {
        std::set<std::string> seen;
        for (const auto& p : points_) {
            if (!seen.insert(p.id).second)
                throw Error("LandmarkSet: duplicate id '" + p.id + "'");
            if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
                throw Error("LandmarkSet: non-finite coordinate for id '" + p.id + "'");
        }
    }

    std::vector<Landmark> points_;
};

} // namespace icreg
