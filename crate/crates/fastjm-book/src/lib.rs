//! Placeholder while the guide is being written.
