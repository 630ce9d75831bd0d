#pragma once

// JSON and plain-text renderings of registration reports and case scores.

#include <sstream>
#include <string>

#include <json.hpp>

#include "metrics.hpp"
#include "pipeline.hpp"

namespace icreg {

inline nlohmann::json to_json(const AffineTransform& a)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : a.m)
        rows.push_back({r[0], r[1], r[2], r[3]});
    return rows;
}

inline nlohmann::json to_json(const RegistrationReport& r)
{
    nlohmann::json j;
    j["affine_skipped"] = r.affine_skipped;
    j["affine"] = to_json(r.affine);
    j["stages"] = nlohmann::json::array();
    for (const auto& s : r.stages) {
        j["stages"].push_back({{"name", s.name},
                               {"initial_objective", s.initial_objective},
                               {"final_objective", s.final_objective},
                               {"level_objectives", s.level_objectives},
                               {"combined_objective", s.combined_objective},
                               {"traces", s.traces},
                               {"seconds", s.seconds}});
    }
    if (r.mask)
        j["mask"] = {{"min", r.mask->min},
                     {"max", r.mask->max},
                     {"mean", r.mask->mean},
                     {"fraction_below_half", r.mask->fraction_below_half}};
    j["warnings"] = r.warnings;
    return j;
}

inline std::string to_text(const RegistrationReport& r)
{
    std::ostringstream o;
    o.precision(6);
    o << "affine: " << (r.affine_skipped ? "skipped (initial field supplied)" : "estimated") << "\n";
    if (!r.affine_skipped)
        for (const auto& row : r.affine.m)
            o << "  [" << row[0] << ", " << row[1] << ", " << row[2] << ", " << row[3] << "]\n";
    for (const auto& s : r.stages) {
        o << s.name << ": objective " << s.initial_objective << " -> " << s.final_objective << " (" << s.seconds
          << " s";
        std::size_t iters = 0;
        for (const auto& t : s.traces)
            iters += t.size();
        o << ", " << iters << " iterations)\n";
    }
    if (r.mask)
        o << "mask: mean " << r.mask->mean << ", min " << r.mask->min << ", max " << r.mask->max
          << ", fraction < 0.5 " << r.mask->fraction_below_half << "\n";
    for (const auto& w : r.warnings)
        o << "warning: " << w << "\n";
    return o.str();
}

inline nlohmann::json to_json(const CaseScore& s, const char* unit = "mm")
{
    nlohmann::json j{{"case_id", s.case_id},
                     {"mae", s.mae_mm},
                     {"unit", unit},
                     {"robustness", s.robustness},
                     {"distances_before", s.distances_before},
                     {"distances_after", s.distances_after},
                     {"warnings", s.warnings}};
    if (s.smoothness)
        j["smoothness"] = {{"fraction_nonpositive_jacobian", s.smoothness->fraction_nonpositive},
                           {"stddev_jacobian", s.smoothness->stddev},
                           {"mean_jacobian", s.smoothness->mean}};
    return j;
}

} // namespace icreg
