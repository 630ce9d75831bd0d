#pragma once

// Pipeline configuration and its flat key-value text form:
//
//   # comment
//   nonrigid.iterations = 40,20
//   nonrigid.theta = 12500,25000
//
// Keys are the dotted field paths of PipelineConfig. Unknown keys are an
// error; every key is optional.

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "common.hpp"

namespace icreg {

struct AffineStageConfig {
    int pyramid_levels_down = 2; // register at quarter resolution
    int iterations = 100;
    double lr0 = 0.003;
    int ncc_window = 7;
    double decay = 1.0;
};

struct NonrigidStageConfig {
    int levels = 2; // half and full resolution
    std::vector<int> iterations{40, 20};
    std::vector<double> theta{12500.0, 25000.0};
    int ncc_window = 3;
    double lr0 = 0.003;
    double decay = 1.0;
};

struct IcStageConfig {
    int bidirectional_iterations = 20;
    double sigma = 2.0;
    double power = 2.0;
    int final_iterations = 20;
    double final_theta = 25000.0;
};

struct PipelineConfig {
    AffineStageConfig affine;
    NonrigidStageConfig nonrigid;
    IcStageConfig ic;
    double epsilon = 1e-5;

    /// Weight 1/2^(N-i) of level i (1 = coarsest, N = finest) in the
    /// combined multilevel objective.
    double level_weight(int i) const { return std::ldexp(1.0, -(nonrigid.levels - i)); }

    void validate() const
    {
        auto fail = [](const std::string& m) { throw Error("config: " + m); };
        if (affine.pyramid_levels_down < 0)
            fail("affine.pyramid_levels_down must be >= 0");
        if (affine.iterations < 0)
            fail("affine.iterations must be >= 0");
        if (affine.ncc_window < 3 || affine.ncc_window % 2 == 0)
            fail("affine.ncc_window must be odd and >= 3");
        if (nonrigid.levels < 1)
            fail("nonrigid.levels must be >= 1");
        if (nonrigid.iterations.size() != std::size_t(nonrigid.levels))
            fail("nonrigid.iterations must list one count per level");
        if (nonrigid.theta.size() != std::size_t(nonrigid.levels))
            fail("nonrigid.theta must list one value per level");
        for (int it : nonrigid.iterations)
            if (it < 0)
                fail("nonrigid.iterations must be >= 0");
        for (double t : nonrigid.theta)
            if (!(t >= 0.0))
                fail("nonrigid.theta must be >= 0");
        if (nonrigid.ncc_window < 3 || nonrigid.ncc_window % 2 == 0)
            fail("nonrigid.ncc_window must be odd and >= 3");
        if (!(affine.lr0 > 0.0) || !(nonrigid.lr0 > 0.0))
            fail("learning rates must be > 0");
        if (!(affine.decay > 0.0) || !(nonrigid.decay > 0.0))
            fail("decay factors must be > 0");
        if (ic.bidirectional_iterations < 0 || ic.final_iterations < 0)
            fail("ic iteration counts must be >= 0");
        if (!(ic.sigma >= 0.0))
            fail("ic.sigma must be >= 0");
        if (!(ic.power > 0.0))
            fail("ic.power must be > 0");
        if (!(ic.final_theta >= 0.0))
            fail("ic.final_theta must be >= 0");
        if (!(epsilon > 0.0))
            fail("objective.epsilon must be > 0");
    }
};

namespace detail {

inline std::string_view trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline int parse_int(std::string_view key, std::string_view v)
{
    v = trim(v);
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw Error("config: " + std::string(key) + " expects an integer, got '" + std::string(v) + "'");
    return out;
}

inline double parse_double(std::string_view key, std::string_view v)
{
    v = trim(v);
    std::string s(v);
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (s.empty() || used != s.size() || !std::isfinite(out))
        throw Error("config: " + std::string(key) + " expects a number, got '" + s + "'");
    return out;
}

template <class T, class Parse>
std::vector<T> parse_list(std::string_view key, std::string_view v, Parse parse)
{
    std::vector<T> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = v.find(',', start);
        out.push_back(parse(key, v.substr(start, comma == std::string_view::npos ? v.npos : comma - start)));
        if (comma == std::string_view::npos)
            break;
        start = comma + 1;
    }
    return out;
}

} // namespace detail

/// Assigns one dotted key. Throws on unknown keys and malformed values.
inline void set_config_value(PipelineConfig& c, std::string_view key_in, std::string_view value)
{
    using namespace detail;
    const std::string key(trim(key_in));
    const auto ints = [&] { return parse_list<int>(key, value, parse_int); };
    const auto reals = [&] { return parse_list<double>(key, value, parse_double); };

    if (key == "affine.pyramid_levels_down")
        c.affine.pyramid_levels_down = parse_int(key, value);
    else if (key == "affine.iterations")
        c.affine.iterations = parse_int(key, value);
    else if (key == "affine.lr0")
        c.affine.lr0 = parse_double(key, value);
    else if (key == "affine.ncc_window")
        c.affine.ncc_window = parse_int(key, value);
    else if (key == "affine.decay")
        c.affine.decay = parse_double(key, value);
    else if (key == "nonrigid.levels")
        c.nonrigid.levels = parse_int(key, value);
    else if (key == "nonrigid.iterations")
        c.nonrigid.iterations = ints();
    else if (key == "nonrigid.theta")
        c.nonrigid.theta = reals();
    else if (key == "nonrigid.ncc_window")
        c.nonrigid.ncc_window = parse_int(key, value);
    else if (key == "nonrigid.lr0")
        c.nonrigid.lr0 = parse_double(key, value);
    else if (key == "nonrigid.decay")
        c.nonrigid.decay = parse_double(key, value);
    else if (key == "ic.bidirectional_iterations")
        c.ic.bidirectional_iterations = parse_int(key, value);
    else if (key == "ic.sigma")
        c.ic.sigma = parse_double(key, value);
    else if (key == "ic.power")
        c.ic.power = parse_double(key, value);
    else if (key == "ic.final_iterations")
        c.ic.final_iterations = parse_int(key, value);
    else if (key == "ic.final_theta")
        c.ic.final_theta = parse_double(key, value);
    else if (key == "objective.epsilon")
        c.epsilon = parse_double(key, value);
    else
        throw Error("config: unknown key '" + key + "'");
}

/// Applies a `key=value` assignment (the form used by --set).
inline void apply_override(PipelineConfig& c, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos)
        throw Error("config: override '" + std::string(assignment) + "' is not of the form key=value");
    set_config_value(c, assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline PipelineConfig parse_config(std::string_view text, PipelineConfig base = {})
{
    std::size_t line_no = 0, start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos)
            end = text.size();
        ++line_no;
        auto line = text.substr(start, end - start);
        if (const auto hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        line = detail::trim(line);
        if (!line.empty()) {
            try {
                apply_override(base, line);
            } catch (const Error& e) {
                throw Error("line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        start = end + 1;
    }
    base.validate();
    return base;
}

inline PipelineConfig load_config(const std::string& path, PipelineConfig base = {})
{
    std::ifstream in(path);
    if (!in)
        throw Error("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str(), std::move(base));
    } catch (const Error& e) {
        throw Error(path + ": " + e.what());
    }
}

/// Serializes every key; parse_config(to_config_text(c)) reproduces c.
inline std::string to_config_text(const PipelineConfig& c)
{
    // shortest form that reads back to the same double
    auto num = [](double x) {
        char buf[32];
        return std::string(buf, std::to_chars(buf, buf + sizeof buf, x).ptr);
    };
    auto list = [&](const auto& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += (i ? ", " : "") + num(double(v[i]));
        return s;
    };
    std::ostringstream o;
    o << "affine.pyramid_levels_down = " << c.affine.pyramid_levels_down << "\n"
      << "affine.iterations = " << c.affine.iterations << "\n"
      << "affine.lr0 = " << num(c.affine.lr0) << "\n"
      << "affine.ncc_window = " << c.affine.ncc_window << "\n"
      << "affine.decay = " << num(c.affine.decay) << "\n"
      << "nonrigid.levels = " << c.nonrigid.levels << "\n"
      << "nonrigid.iterations = " << list(c.nonrigid.iterations) << "\n"
      << "nonrigid.theta = " << list(c.nonrigid.theta) << "\n"
      << "nonrigid.ncc_window = " << c.nonrigid.ncc_window << "\n"
      << "nonrigid.lr0 = " << num(c.nonrigid.lr0) << "\n"
      << "nonrigid.decay = " << num(c.nonrigid.decay) << "\n"
      << "ic.bidirectional_iterations = " << c.ic.bidirectional_iterations << "\n"
      << "ic.sigma = " << num(c.ic.sigma) << "\n"
      << "ic.power = " << num(c.ic.power) << "\n"
      << "ic.final_iterations = " << c.ic.final_iterations << "\n"
      << "ic.final_theta = " << num(c.ic.final_theta) << "\n"
      << "objective.epsilon = " << num(c.epsilon) << "\n";
    return o.str();
}

} // namespace icreg
