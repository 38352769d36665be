//! Holds the `acceptance` test target. Run it with
//! `cargo test -p nlkg-validation --test acceptance`; set `NLKG_CRITERION=<n>`
//! to run a single check.
