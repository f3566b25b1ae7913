#include "para/io.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "para/errors.hpp"

namespace para {
namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(trim(field));
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

double parse_cell(const std::string& text, int line_no, const std::string& column) {
    const std::string where = "line " + std::to_string(line_no) + ", column " + column;
    if (text.empty()) throw ParseError("targets csv: empty cell at " + where);
    const char* begin = text.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end != begin + text.size()) {
        throw ParseError("targets csv: unparsable value \"" + text + "\" at " + where);
    }
    if (!std::isfinite(v)) {
        throw ParseError("targets csv: non-finite value at " + where);
    }
    return v;
}

} // namespace

std::vector<TargetPair> load_targets_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("targets csv: cannot open " + path);

    std::string line;
    if (!std::getline(f, line)) throw ParseError("targets csv: " + path + " is empty");
    const std::vector<std::string> header = split_csv_line(line);

    // header must read x_0..x_{k-1},y_0..y_{d-1} in order
    int k = 0;
    while (k < int(header.size()) && header[k] == "x_" + std::to_string(k)) ++k;
    int d = 0;
    while (k + d < int(header.size()) && header[k + d] == "y_" + std::to_string(d)) ++d;
    if (k == 0 || d == 0 || k + d != int(header.size())) {
        throw ParseError("targets csv: header must be x_0..x_{k-1},y_0..y_{d-1}");
    }

    std::vector<TargetPair> pairs;
    int line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (trim(line).empty()) continue; // allow a trailing blank line
        const std::vector<std::string> fields = split_csv_line(line);
        if (int(fields.size()) != k + d) {
            throw ParseError("targets csv: line " + std::to_string(line_no) + " has " +
                             std::to_string(fields.size()) + " fields, expected " +
                             std::to_string(k + d));
        }
        Matrix x(k, 1), y(d, 1);
        for (int j = 0; j < k; ++j) x(j, 0) = parse_cell(fields[j], line_no, header[j]);
        for (int j = 0; j < d; ++j) y(j, 0) = parse_cell(fields[k + j], line_no, header[k + j]);
        pairs.emplace_back(std::move(x), std::move(y));
    }
    if (pairs.empty()) throw ParseError("targets csv: " + path + " has no data rows");
    return pairs;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("run config: cannot open " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("run config: invalid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("run config: top level must be an object");

    RunConfig cfg;
    try {
        for (const auto& [key, value] : doc.items()) {
            if (key == "model") cfg.model_path = value.get<std::string>();
            else if (key == "targets") cfg.targets_path = value.get<std::string>();
            else if (key == "out") cfg.out_path = value.get<std::string>();
            else if (key == "rank") cfg.train.rank = value.get<int>();
            else if (key == "gamma") cfg.train.gamma = value.get<double>();
            else if (key == "steps") cfg.train.steps = value.get<int>();
            else if (key == "learning_rate") cfg.train.learning_rate = value.get<double>();
            else if (key == "ridge_eps") cfg.train.ridge_eps = value.get<double>();
            else if (key == "seed") cfg.train.seed = value.get<std::uint64_t>();
            else if (key == "layers") cfg.train.layer_filter = value.get<std::string>();
            else throw ParseError("run config: unknown key \"" + key + "\"");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("run config: wrong value type: ") + e.what());
    }

    for (const std::string* p : {&cfg.model_path, &cfg.targets_path}) {
        if (!p->empty() && !std::filesystem::exists(*p)) {
            throw ParseError("run config: path does not exist: " + *p);
        }
    }
    validate(cfg.train);
    return cfg;
}

} // namespace para
