//! Holds the `acceptance` test target; run it with
//! `cargo test -p ethena-ctl-suite --test acceptance`.
