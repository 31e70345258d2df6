//! Acceptance gate for the workspace. Everything lives in `tests/acceptance.rs`.
