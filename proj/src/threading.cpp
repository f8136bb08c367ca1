#include "lesa/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

#include "lesa/common.hpp"

namespace lesa {

namespace {

thread_local bool g_in_parallel = false;

class Pool {
public:
    static Pool& instance() {
        static Pool pool;
        return pool;
    }

    void resize(int n) {
        std::lock_guard<std::mutex> lk(api_mutex_);
        stop_workers();
        target_ = n < 1 ? 1 : n;
        start_workers();
    }

    int size() {
        std::lock_guard<std::mutex> lk(api_mutex_);
        return target_;
    }

    void run(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
        std::unique_lock<std::mutex> lk(api_mutex_);
        const int workers = static_cast<int>(threads_.size()) + 1;
        const int chunks = static_cast<int>(std::min<int64_t>(workers, n));
        if (chunks <= 1) {
            lk.unlock();
            body(0, n);
            return;
        }
        job_body_ = &body;
        job_n_ = n;
        job_chunks_ = chunks;
        pending_.store(chunks - 1, std::memory_order_release);
        {
            std::lock_guard<std::mutex> g(mutex_);
            ++generation_;
        }
        cv_.notify_all();
        run_chunk(0);
        while (pending_.load(std::memory_order_acquire) != 0) std::this_thread::yield();
        job_body_ = nullptr;
    }

private:
    Pool() : target_(1) {}
    ~Pool() { stop_workers(); }

    void run_chunk(int idx) {
        const int64_t per = job_n_ / job_chunks_;
        const int64_t rem = job_n_ % job_chunks_;
        const int64_t begin = idx * per + std::min<int64_t>(idx, rem);
        const int64_t end = begin + per + (idx < rem ? 1 : 0);
        if (begin < end) {
            g_in_parallel = true;
            (*job_body_)(begin, end);
            g_in_parallel = false;
        }
    }

    void start_workers() {
        stop_ = false;
        for (int i = 1; i < target_; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> g(mutex_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
        threads_.clear();
    }

    void worker_loop(int idx) {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> g(mutex_);
                cv_.wait(g, [&] { return stop_ || generation_ != seen; });
                seen = generation_;
                if (stop_) return;
            }
            if (job_body_ && idx < job_chunks_) {
                run_chunk(idx);
                pending_.fetch_sub(1, std::memory_order_acq_rel);
            }
        }
    }

    std::mutex api_mutex_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::vector<std::thread> threads_;
    int target_;
    bool stop_ = false;
    uint64_t generation_ = 0;
    const std::function<void(int64_t, int64_t)>* job_body_ = nullptr;
    int64_t job_n_ = 0;
    int job_chunks_ = 0;
    std::atomic<int> pending_{0};
};

}  // namespace

void set_num_threads(int n) { Pool::instance().resize(n); }

int num_threads() { return Pool::instance().size(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    if (g_in_parallel) {  // nested regions run serial
        body(0, n);
        return;
    }
    Pool::instance().run(n, body);
}

}  // namespace lesa
