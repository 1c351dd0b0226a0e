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

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace iort::journal {

class JournalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Append-only record log, one record per '\n'-terminated line. A trailing
/// partial line is a torn write and is discarded on load.
class Journal {
public:
    virtual ~Journal() = default;

    /// Complete records in append order.
    virtual std::vector<std::string> load() = 0;

    /// `record` must not contain '\n'. With `durable`, returns only after the
    /// bytes reached stable storage.
    virtual void append(std::string_view record, bool durable) = 0;

    /// Atomically replaces the whole log (compaction).
    virtual void rewrite(std::span<const std::string> records) = 0;

    virtual std::uint64_t size_bytes() const = 0;
};

/// Splits raw journal bytes into complete records; `valid_bytes` receives
/// the length of the prefix holding them.
std::vector<std::string> split_records(std::string_view data, std::uint64_t* valid_bytes = nullptr);

class FileJournal final : public Journal {
public:
    /// Opens (creating if needed). `sync` = false skips fsync, for tests and
    /// throwaway runs.
    explicit FileJournal(std::string path, bool sync = true);
    ~FileJournal() override;
    FileJournal(const FileJournal&) = delete;
    FileJournal& operator=(const FileJournal&) = delete;

    std::vector<std::string> load() override;
    void append(std::string_view record, bool durable) override;
    void rewrite(std::span<const std::string> records) override;
    std::uint64_t size_bytes() const override { return size_; }

    const std::string& path() const { return path_; }

    /// Reads a journal file without opening it for writing.
    static std::vector<std::string> read(const std::string& path);

private:
    void open_for_append();

    std::string path_;
    bool sync_;
    int fd_ = -1;
    std::uint64_t size_ = 0;
};

/// In-memory journal; `contents()` exposes the exact bytes a file would hold.
class MemoryJournal final : public Journal {
public:
    MemoryJournal() = default;
    explicit MemoryJournal(std::string contents) : data_(std::move(contents)) {}

    std::vector<std::string> load() override;
    void append(std::string_view record, bool durable) override;
    void rewrite(std::span<const std::string> records) override;
    std::uint64_t size_bytes() const override { return data_.size(); }

    const std::string& contents() const { return data_; }

private:
    std::string data_;
};

}  // namespace iort::journal
