#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ssx {

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::string& header) : f_(path, std::ios::trunc) {
        if (!f_) throw std::runtime_error("csv: cannot open " + path);
        f_ << header << "\n";
    }

    template <class... Args>
    void row(const Args&... args) {
        std::ostringstream ss;
        ss.precision(12);
        bool first = true;
        ((ss << (first ? "" : ",") << args, first = false), ...);
        f_ << ss.str() << "\n";
    }

    void close() { f_.close(); }

private:
    std::ofstream f_;
};

}  // namespace ssx
