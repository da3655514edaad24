#include "twostage/parallel.hpp"

#include <algorithm>

namespace twostage {

WorkerPool::WorkerPool(int workers)
{
    const int extra = std::max(workers, 1) - 1;
    threads_.reserve(static_cast<std::size_t>(extra));
    for (int i = 0; i < extra; ++i)
        threads_.emplace_back([this] { worker_loop(); });
}

WorkerPool::~WorkerPool()
{
    {
        std::lock_guard lock(mutex_);
        stop_ = true;
    }
    wake_.notify_all();
    for (auto& t : threads_)
        t.join();
}

void WorkerPool::drain()
{
    std::unique_lock lock(mutex_);
    while (next_ < count_) {
        const std::size_t i = next_++;
        const auto* fn = task_;
        lock.unlock();
        try {
            (*fn)(i);
        } catch (...) {
            lock.lock();
            errors_[i] = std::current_exception();
            lock.unlock();
        }
        lock.lock();
        if (++finished_ == count_)
            done_.notify_all();
    }
}

void WorkerPool::worker_loop()
{
    std::size_t seen = 0;
    for (;;) {
        {
            std::unique_lock lock(mutex_);
            wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_)
                return;
            seen = generation_;
        }
        drain();
    }
}

void WorkerPool::run(std::size_t n, const std::function<void(std::size_t)>& fn)
{
    if (n == 0)
        return;
    if (threads_.empty()) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    {
        std::lock_guard lock(mutex_);
        task_ = &fn;
        next_ = 0;
        count_ = n;
        finished_ = 0;
        errors_.assign(n, nullptr);
        ++generation_;
    }
    wake_.notify_all();
    drain();
    std::unique_lock lock(mutex_);
    done_.wait(lock, [&] { return finished_ == count_; });
    task_ = nullptr;
    for (auto& e : errors_)
        if (e)
            std::rethrow_exception(e);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn)
{
    WorkerPool pool(static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), std::max<std::size_t>(n, 1))));
    pool.run(n, fn);
}

} // namespace twostage
