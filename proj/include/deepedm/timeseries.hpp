#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "deepedm/nn.hpp"

namespace deepedm {

/// D channels observed over L steps, stored channel-major (row d holds channel d).
class TimeSeries {
public:
    TimeSeries() = default;

    TimeSeries(std::vector<std::string> channels, std::size_t length, std::vector<double> values)
        : channels_(std::move(channels)), length_(length), values_(std::move(values)) {
        if (values_.size() != channels_.size() * length_) {
            throw DimensionError("time series: " + std::to_string(channels_.size()) + " channels x " +
                                 std::to_string(length_) + " steps needs " +
                                 std::to_string(channels_.size() * length_) + " values, got " +
                                 std::to_string(values_.size()));
        }
    }

    static TimeSeries zeros(std::size_t channels, std::size_t length) {
        return {default_names(channels), length, std::vector<double>(channels * length, 0.0)};
    }

    static std::vector<std::string> default_names(std::size_t channels) {
        std::vector<std::string> names;
        for (std::size_t d = 0; d < channels; ++d) names.push_back("ch" + std::to_string(d));
        return names;
    }

    [[nodiscard]] std::size_t channels() const noexcept { return channels_.size(); }
    [[nodiscard]] std::size_t length() const noexcept { return length_; }
    [[nodiscard]] const std::vector<std::string>& channel_names() const noexcept { return channels_; }

    [[nodiscard]] double at(std::size_t d, std::size_t t) const { return values_.at(d * length_ + t); }
    double& at(std::size_t d, std::size_t t) { return values_.at(d * length_ + t); }

    [[nodiscard]] std::span<const double> row(std::size_t d) const {
        return std::span<const double>(values_).subspan(d * length_, length_);
    }
    [[nodiscard]] std::span<double> row(std::size_t d) { return std::span<double>(values_).subspan(d * length_, length_); }

    [[nodiscard]] const std::vector<double>& values() const noexcept { return values_; }

    /// Steps [begin, begin + count) of every channel.
    [[nodiscard]] TimeSeries slice_time(std::size_t begin, std::size_t count) const {
        if (begin + count > length_) {
            throw std::out_of_range("time series: slice [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") exceeds length " + std::to_string(length_));
        }
        std::vector<double> v;
        v.reserve(channels() * count);
        for (std::size_t d = 0; d < channels(); ++d) {
            const auto r = row(d).subspan(begin, count);
            v.insert(v.end(), r.begin(), r.end());
        }
        return {channels_, count, std::move(v)};
    }

    [[nodiscard]] TimeSeries select_channels(const std::vector<std::size_t>& idx) const {
        std::vector<std::string> names;
        std::vector<double> v;
        for (std::size_t d : idx) {
            if (d >= channels()) {
                throw std::out_of_range("time series: channel " + std::to_string(d) + " out of range");
            }
            names.push_back(channels_[d]);
            const auto r = row(d);
            v.insert(v.end(), r.begin(), r.end());
        }
        return {std::move(names), length_, std::move(v)};
    }

    /// [D x L] tensor view (copy).
    [[nodiscard]] Tensor to_tensor() const { return Tensor::from({channels(), length_}, values_); }

    static TimeSeries from_tensor(const Tensor& t, std::vector<std::string> names = {}) {
        if (t.rank() != 2) {
            throw DimensionError("time series: expected [channels x length] tensor, got " + to_string(t.shape()));
        }
        if (names.empty()) names = default_names(t.dim(0));
        return {std::move(names), t.dim(1), t.to_vector()};
    }

    friend bool operator==(const TimeSeries&, const TimeSeries&) = default;

private:
    std::vector<std::string> channels_;
    std::size_t length_ = 0;
    std::vector<double> values_;
};

class CsvError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

}  // namespace detail

/// Write `t,<channel>...` followed by one row per step. Values use shortest
/// round-trip formatting so that loading the file reproduces them exactly.
inline void write_csv(std::ostream& os, const TimeSeries& series, std::size_t first_index = 0) {
    os << 't';
    for (const auto& name : series.channel_names()) os << ',' << name;
    os << '\n';
    for (std::size_t t = 0; t < series.length(); ++t) {
        os << (first_index + t);
        for (std::size_t d = 0; d < series.channels(); ++d) os << ',' << format_double(series.at(d, t));
        os << '\n';
    }
}

/// Write to `path` via a temporary file and rename, so readers never see a partial file.
template <typename Writer>
void write_file_atomic(const std::filesystem::path& path, Writer&& writer) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        }
        writer(os);
        os.flush();
        if (!os) {
            throw std::runtime_error("failed writing '" + tmp.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

inline void save_csv(const std::filesystem::path& path, const TimeSeries& series, std::size_t first_index = 0) {
    write_file_atomic(path, [&](std::ostream& os) { write_csv(os, series, first_index); });
}

/// Parse a header row of channel names and a numeric body. A leading column
/// named `t` is treated as the step index and dropped. NaN or non-numeric
/// cells are rejected with their 1-based line and column.
inline TimeSeries read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) {
        throw CsvError("csv: empty input (expected a header row)");
    }
    auto header = detail::split_commas(line);
    for (auto& h : header) h = detail::trim(h);
    const bool has_index = !header.empty() && header.front() == "t";
    const std::size_t skip = has_index ? 1 : 0;
    if (header.size() <= skip) {
        throw CsvError("csv: header has no data columns");
    }
    std::vector<std::string> names(header.begin() + static_cast<std::ptrdiff_t>(skip), header.end());
    const std::size_t d = names.size();
    std::vector<std::vector<double>> columns(d);
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_commas(line);
        if (cells.size() != header.size()) {
            throw CsvError("csv: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                           " fields, header has " + std::to_string(header.size()));
        }
        for (std::size_t c = 0; c < d; ++c) {
            const auto cell = detail::trim(cells[c + skip]);
            double v = 0.0;
            try {
                v = parse_double(cell);
            } catch (const std::invalid_argument&) {
                throw CsvError("csv: line " + std::to_string(line_no) + ", column " + std::to_string(c + skip + 1) +
                               ": '" + std::string(cell) + "' is not a number");
            }
            if (!std::isfinite(v)) {
                throw CsvError("csv: non-finite value at line " + std::to_string(line_no) + ", column " +
                               std::to_string(c + skip + 1));
            }
            columns[c].push_back(v);
        }
    }
    const std::size_t len = columns.front().size();
    std::vector<double> values;
    values.reserve(d * len);
    for (const auto& col : columns) values.insert(values.end(), col.begin(), col.end());
    return {std::move(names), len, std::move(values)};
}

inline TimeSeries load_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw CsvError("csv: cannot open '" + path.string() + "'");
    }
    return read_csv(is);
}

}  // namespace deepedm
