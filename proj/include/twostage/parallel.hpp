#pragma once

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace twostage {

/// Fixed set of threads that execute index ranges. `run` blocks until every
/// index has been processed; results must be written to per-index slots so
/// the outcome does not depend on which worker handled which index.
class WorkerPool {
public:
    explicit WorkerPool(int workers);
    ~WorkerPool();

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    int size() const { return static_cast<int>(threads_.size()) + 1; }

    /// Calls fn(i) for i in [0, n). The first exception (lowest index) is
    /// rethrown after all indices finish.
    void run(std::size_t n, const std::function<void(std::size_t)>& fn);

private:
    void worker_loop();
    void drain();

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    const std::function<void(std::size_t)>* task_ = nullptr;
    std::size_t next_ = 0;
    std::size_t count_ = 0;
    std::size_t finished_ = 0;
    std::size_t generation_ = 0;
    bool stop_ = false;
    std::vector<std::exception_ptr> errors_;
};

/// One-shot convenience wrapper around WorkerPool.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

} // namespace twostage
