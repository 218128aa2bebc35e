#pragma once

#include "chatrec/dataset.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace testing {

namespace fs = std::filesystem;

inline fs::path fixtures() { return CHATREC_FIXTURES_DIR; }

inline fs::path movielens_dir() {
    if (const char* env = std::getenv("CHATREC_DATA_DIR")) return env;
    return CHATREC_TEST_DATA_DIR;
}

inline bool have_movielens() { return fs::exists(movielens_dir() / "u.data"); }

inline const chatrec::Dataset& movielens() {
    static const chatrec::Dataset ds = chatrec::load_movielens(movielens_dir());
    return ds;
}

inline const chatrec::Dataset& micro() {
    static const chatrec::Dataset ds = chatrec::load_movielens(fixtures() / "micro");
    return ds;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("chatrec_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

}  // namespace testing
