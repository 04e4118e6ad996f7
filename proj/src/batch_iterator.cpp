#include "switch_sae/data.hpp"

#include <stdexcept>
#include <string>

namespace ssae {
namespace {
constexpr Index kStageRows = 1024;
}

BatchIterator::BatchIterator(std::unique_ptr<ActivationReader> reader, Index batch_size,
                             Index shuffle_buffer, std::uint64_t seed)
    : reader_(std::move(reader)),
      batch_size_(batch_size),
      shuffle_buffer_(shuffle_buffer),
      rng_(seed) {
  if (!reader_) throw std::invalid_argument("BatchIterator: null reader");
  if (batch_size_ < 1) throw std::invalid_argument("BatchIterator: batch size must be at least 1");
  if (shuffle_buffer_ < 1)
    throw std::invalid_argument("BatchIterator: shuffle buffer must hold at least 1 row");
  if (static_cast<std::uint64_t>(batch_size_) > reader_->count())
    throw std::invalid_argument("BatchIterator: batch size " + std::to_string(batch_size_) +
                                " exceeds the " + std::to_string(reader_->count()) +
                                " rows available");
}

bool BatchIterator::next_row(Vectord& row) {
  if (staged_pos_ >= staged_.rows()) {
    if (reader_->done()) return false;
    staged_ = reader_->read(kStageRows);
    staged_pos_ = 0;
  }
  row = staged_.row(staged_pos_++).transpose();
  return true;
}

void BatchIterator::start_epoch() {
  reader_->rewind();
  staged_.resize(0, reader_->dim());
  staged_pos_ = 0;
  buffer_.clear();
  emitted_in_epoch_ = 0;
  Vectord row;
  while (static_cast<Index>(buffer_.size()) < shuffle_buffer_ && next_row(row))
    buffer_.push_back(row);
}

Batchd BatchIterator::next_batch() {
  if (!started_) {
    start_epoch();
    started_ = true;
  } else if (emitted_in_epoch_ + static_cast<std::uint64_t>(batch_size_) > reader_->count()) {
    ++epoch_;
    start_epoch();
  }

  Batchd out(batch_size_, dim());
  Vectord incoming;
  for (Index i = 0; i < batch_size_; ++i) {
    const std::size_t pick = static_cast<std::size_t>(rng_.below(buffer_.size()));
    out.row(i) = buffer_[pick].transpose();
    if (next_row(incoming)) {
      buffer_[pick] = incoming;
    } else {
      buffer_[pick] = std::move(buffer_.back());
      buffer_.pop_back();
    }
    ++emitted_in_epoch_;
  }
  return out;
}

InMemorySource::InMemorySource(Batchd data, Index batch_size)
    : data_(std::move(data)), batch_size_(batch_size) {
  if (batch_size_ < 1 || batch_size_ > data_.rows())
    throw std::invalid_argument("InMemorySource: batch size must lie in [1, rows]");
}

Batchd InMemorySource::next_batch() {
  if (cursor_ + batch_size_ > data_.rows()) cursor_ = 0;
  Batchd out = data_.middleRows(cursor_, batch_size_);
  cursor_ += batch_size_;
  return out;
}

}  // namespace ssae
