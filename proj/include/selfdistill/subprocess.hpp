// Copyright 2026 The selfdistill Authors. All Rights Reserved.
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
//
// Minimal POSIX child process with piped stdin/stdout and line reads bounded
// by a deadline. stderr is inherited.
#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "selfdistill/errors.hpp"

namespace selfdistill {

/// argv for running `command` through /bin/sh, so quoting works as in a shell.
inline std::vector<std::string> shell_command(const std::string& command) {
  return {"/bin/sh", "-c", "exec " + command};
}

class ChildProcess {
 public:
  enum class ReadStatus { kLine, kEof, kTimeout, kOverflow };

  ChildProcess(const std::vector<std::string>& argv, const std::map<std::string, std::string>& env) {
    if (argv.empty()) throw PluginCrashed("empty plugin command line");
    static std::once_flag ignore_sigpipe;
    std::call_once(ignore_sigpipe, [] { ::signal(SIGPIPE, SIG_IGN); });

    int in_pipe[2], out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw PluginCrashed(std::string("pipe: ") + std::strerror(errno));
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      throw PluginCrashed(std::string("pipe: ") + std::strerror(errno));
    }
    // Reports exec failure to the parent; closed by a successful exec.
    int err_pipe[2];
    if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
      for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
      throw PluginCrashed(std::string("pipe: ") + std::strerror(errno));
    }

    std::vector<std::string> env_strings;
    for (const auto& [k, v] : env) env_strings.push_back(k + "=" + v);
    std::vector<char*> cargv;
    for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);

    pid_ = ::fork();
    if (pid_ < 0) {
      for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]}) ::close(fd);
      throw PluginCrashed(std::string("fork: ") + std::strerror(errno));
    }
    if (pid_ == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::signal(SIGPIPE, SIG_DFL);
      for (auto& s : env_strings) ::putenv(s.data());
      ::execvp(cargv[0], cargv.data());
      const int e = errno;
      [[maybe_unused]] auto n = ::write(err_pipe[1], &e, sizeof e);
      ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);
    stdin_fd_ = in_pipe[1];
    stdout_fd_ = out_pipe[0];

    int child_errno = 0;
    ssize_t n;
    do {
      n = ::read(err_pipe[0], &child_errno, sizeof child_errno);
    } while (n < 0 && errno == EINTR);
    ::close(err_pipe[0]);
    if (n == static_cast<ssize_t>(sizeof child_errno)) {
      wait_for_exit(std::chrono::milliseconds(1000));
      close_fds();
      throw PluginCrashed("cannot launch '" + argv[0] + "': " + std::strerror(child_errno));
    }
  }

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  ~ChildProcess() {
    close_stdin();
    if (!exit_status_ && !wait_for_exit(std::chrono::milliseconds(2000))) kill();
    close_fds();
  }

  pid_t pid() const { return pid_; }

  /// False when the child has closed its stdin.
  bool write_all(const std::string& data) {
    if (stdin_fd_ < 0) return false;
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(stdin_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  /// Reads one '\n'-terminated line (terminator stripped). A line longer than
  /// `max_bytes` yields kOverflow.
  ReadStatus read_line(std::string& line, std::chrono::steady_clock::time_point deadline, std::size_t max_bytes) {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        if (nl > max_bytes) return ReadStatus::kOverflow;
        line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return ReadStatus::kLine;
      }
      if (buffer_.size() > max_bytes) return ReadStatus::kOverflow;
      if (stdout_fd_ < 0) return ReadStatus::kEof;

      const auto now = std::chrono::steady_clock::now();
      if (now >= deadline) return ReadStatus::kTimeout;
      const auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
      pollfd pfd{stdout_fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(wait_ms + 1, 1 << 30)));
      if (rc < 0) {
        if (errno == EINTR) continue;
        return ReadStatus::kEof;
      }
      if (rc == 0) continue;
      char chunk[8192];
      const ssize_t n = ::read(stdout_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        return ReadStatus::kEof;
      }
      if (n == 0) {
        ::close(stdout_fd_);
        stdout_fd_ = -1;
        continue;
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void close_stdin() {
    if (stdin_fd_ >= 0) {
      ::close(stdin_fd_);
      stdin_fd_ = -1;
    }
  }

  /// Polls for exit until `timeout`; true once the child has been reaped.
  bool wait_for_exit(std::chrono::milliseconds timeout) {
    if (exit_status_) return true;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      int status = 0;
      const pid_t r = ::waitpid(pid_, &status, WNOHANG);
      if (r == pid_) {
        exit_status_ = status;
        return true;
      }
      if (r < 0 && errno != EINTR) {
        exit_status_ = 0;
        return true;
      }
      if (std::chrono::steady_clock::now() >= deadline) return false;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }

  void kill() {
    if (exit_status_) return;
    ::kill(pid_, SIGKILL);
    int status = 0;
    while (::waitpid(pid_, &status, 0) < 0 && errno == EINTR) {
    }
    exit_status_ = status;
  }

  bool running() {
    if (exit_status_) return false;
    return !wait_for_exit(std::chrono::milliseconds(0));
  }

  /// Human-readable exit description, e.g. "exit code 1" or "signal 9".
  std::string exit_description() const {
    if (!exit_status_) return "still running";
    if (WIFEXITED(*exit_status_)) return "exit code " + std::to_string(WEXITSTATUS(*exit_status_));
    if (WIFSIGNALED(*exit_status_)) return "signal " + std::to_string(WTERMSIG(*exit_status_));
    return "status " + std::to_string(*exit_status_);
  }

  std::optional<int> exit_code() const {
    if (exit_status_ && WIFEXITED(*exit_status_)) return WEXITSTATUS(*exit_status_);
    return std::nullopt;
  }

 private:
  void close_fds() {
    close_stdin();
    if (stdout_fd_ >= 0) {
      ::close(stdout_fd_);
      stdout_fd_ = -1;
    }
  }

  pid_t pid_ = -1;
  int stdin_fd_ = -1;
  int stdout_fd_ = -1;
  std::string buffer_;
  std::optional<int> exit_status_;
};

}  // namespace selfdistill
