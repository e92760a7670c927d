#pragma once

// Tiny persistent fork-join pool for data-parallel row loops. Work is split
// into contiguous chunks with a fixed layout, so results are bitwise
// independent of the number of workers.

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace poigraph {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  size_t workers() const { return threads_.size() + 1; }

  // fn(begin, end) over a partition of [0, n). The calling thread runs the
  // first chunk itself.
  void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    const size_t parts = workers();
    if (n == 0) return;
    if (parts == 1 || n < 2 * parts) {
      fn(0, n);
      return;
    }
    const size_t chunk = (n + parts - 1) / parts;
    {
      std::unique_lock<std::mutex> lock(mu_);
      job_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      pending_ = 0;
      for (size_t p = 1; p < parts; ++p) {
        if (p * chunk < n) ++pending_;
      }
      ++epoch_;
    }
    cv_.notify_all();
    fn(0, std::min(chunk, n));
    std::unique_lock<std::mutex> lock(mu_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

 private:
  ThreadPool() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw < 1) hw = 1;
    for (unsigned i = 1; i < hw; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  void worker_loop(size_t index) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(size_t, size_t)>* job = nullptr;
      size_t lo = 0, hi = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        if (job_ != nullptr) {
          lo = index * job_chunk_;
          hi = std::min(lo + job_chunk_, job_n_);
          if (lo < hi) job = job_;
        }
      }
      if (job != nullptr) {
        (*job)(lo, hi);
        std::unique_lock<std::mutex> lock(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(size_t, size_t)>* job_ = nullptr;
  size_t job_n_ = 0;
  size_t job_chunk_ = 0;
  size_t pending_ = 0;
  uint64_t epoch_ = 0;
  bool stop_ = false;
};

inline void parallel_rows(size_t n, const std::function<void(size_t, size_t)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace poigraph
