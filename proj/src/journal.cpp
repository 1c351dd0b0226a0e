// Copyright 2026 The IoRT Arm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "iort/journal.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace iort::journal {

namespace {

[[noreturn]] void fail(const std::string& what, const std::string& path) {
    throw JournalError(what + " '" + path + "': " + std::strerror(errno));
}

void write_all(int fd, std::string_view data, const std::string& path) {
    while (!data.empty()) {
        auto n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            fail("write failed on", path);
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {};
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void sync_parent_dir(const std::string& path) {
    auto dir = std::filesystem::path(path).parent_path();
    if (dir.empty()) dir = ".";
    int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
}

void check_record(std::string_view record) {
    if (record.find('\n') != std::string_view::npos) throw JournalError("journal record contains a newline");
}

}  // namespace

std::vector<std::string> split_records(std::string_view data, std::uint64_t* valid_bytes) {
    std::vector<std::string> records;
    std::size_t start = 0;
    while (true) {
        auto nl = data.find('\n', start);
        if (nl == std::string_view::npos) break;
        records.emplace_back(data.substr(start, nl - start));
        start = nl + 1;
    }
    if (valid_bytes) *valid_bytes = start;
    return records;
}

FileJournal::FileJournal(std::string path, bool sync) : path_(std::move(path)), sync_(sync) {
    open_for_append();
}

FileJournal::~FileJournal() {
    if (fd_ >= 0) ::close(fd_);
}

void FileJournal::open_for_append() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) fail("cannot open journal", path_);
    struct stat st {};
    if (::fstat(fd_, &st) != 0) fail("cannot stat journal", path_);
    size_ = static_cast<std::uint64_t>(st.st_size);
}

std::vector<std::string> FileJournal::load() {
    const auto data = read_file(path_);
    std::uint64_t valid = 0;
    auto records = split_records(data, &valid);
    if (valid != data.size()) {
        // torn tail from a crash mid-append
        if (::ftruncate(fd_, static_cast<off_t>(valid)) != 0) fail("cannot truncate journal", path_);
        if (sync_ && ::fsync(fd_) != 0) fail("fsync failed on", path_);
        size_ = valid;
    }
    return records;
}

void FileJournal::append(std::string_view record, bool durable) {
    check_record(record);
    std::string line;
    line.reserve(record.size() + 1);
    line.append(record);
    line.push_back('\n');
    write_all(fd_, line, path_);
    size_ += line.size();
    if (durable && sync_ && ::fdatasync(fd_) != 0) fail("fdatasync failed on", path_);
}

void FileJournal::rewrite(std::span<const std::string> records) {
    const std::string tmp = path_ + ".compact";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) fail("cannot create", tmp);
    try {
        for (const auto& r : records) {
            write_all(fd, r, tmp);
            write_all(fd, "\n", tmp);
        }
        if (sync_ && ::fsync(fd) != 0) fail("fsync failed on", tmp);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::close(fd);
    if (::rename(tmp.c_str(), path_.c_str()) != 0) fail("cannot replace journal", path_);
    if (sync_) sync_parent_dir(path_);
    open_for_append();
}

std::vector<std::string> FileJournal::read(const std::string& path) {
    if (!std::filesystem::exists(path)) throw JournalError("journal '" + path + "' does not exist");
    return split_records(read_file(path));
}

std::vector<std::string> MemoryJournal::load() {
    std::uint64_t valid = 0;
    auto records = split_records(data_, &valid);
    data_.resize(valid);
    return records;
}

void MemoryJournal::append(std::string_view record, bool) {
    check_record(record);
    data_.append(record);
    data_.push_back('\n');
}

void MemoryJournal::rewrite(std::span<const std::string> records) {
    data_.clear();
    for (const auto& r : records) append(r, true);
}

}  // namespace iort::journal
