#pragma once

// Landmark CSV files:
//
//   Landmark,X,Y,Z
//   1,10,20,30
//   2,1.5,2.5,3.5
//
// Coordinates are 0-based voxel indices unless `index_offset` says
// otherwise (pass -1 for 1-based sources). CRLF endings and blank lines are
// accepted.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "config.hpp"
#include "landmarks.hpp"

namespace icreg {

inline LandmarkSet parse_landmarks(std::istream& in, const std::string& origin = "landmarks", double index_offset = 0.0)
{
    LandmarkSet out;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view body = detail::trim(line);
        if (body.empty())
            continue;
        if (!header_seen) {
            std::string h(body);
            std::erase(h, ' ');
            if (h != "Landmark,X,Y,Z")
                throw Error(origin + ":" + std::to_string(line_no) + ": expected header 'Landmark,X,Y,Z'");
            header_seen = true;
            continue;
        }
        std::string fields[4];
        std::size_t start = 0, count = 0;
        while (count < 4) {
            const auto comma = body.find(',', start);
            fields[count++] = std::string(detail::trim(body.substr(start, comma == body.npos ? body.npos : comma - start)));
            if (comma == body.npos)
                break;
            start = comma + 1;
        }
        if (count != 4 || body.find(',', start) != body.npos || fields[0].empty())
            throw Error(origin + ":" + std::to_string(line_no) + ": expected 4 comma-separated fields");
        double xyz[3];
        for (int k = 0; k < 3; ++k) {
            std::size_t used = 0;
            try {
                xyz[k] = std::stod(fields[k + 1], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != fields[k + 1].size() || !std::isfinite(xyz[k]))
                throw Error(origin + ":" + std::to_string(line_no) + ": malformed coordinate '" + fields[k + 1] + "'");
        }
        try {
            out.add({fields[0], xyz[0] + index_offset, xyz[1] + index_offset, xyz[2] + index_offset});
        } catch (const Error& e) {
            throw Error(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!header_seen)
        throw Error(origin + ": missing header 'Landmark,X,Y,Z'");
    return out;
}

inline LandmarkSet read_landmarks(const std::string& path, double index_offset = 0.0)
{
    std::ifstream in(path);
    if (!in)
        throw Error(path + ": cannot open landmark file");
    return parse_landmarks(in, path, index_offset);
}

inline void write_landmarks(const LandmarkSet& points, const std::string& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error(path + ": cannot open for writing");
    out << "Landmark,X,Y,Z\n" << std::setprecision(17);
    for (const auto& p : points)
        out << p.id << ',' << p.x << ',' << p.y << ',' << p.z << '\n';
    if (!out)
        throw Error(path + ": write failed");
}

} // namespace icreg
