//! Regenerates the checked-in lifecycle conformance fixture:
//!
//! ```text
//! cargo run -p awcp-core --example gen_lifecycle_fixture > crates/core/fixtures/lifecycle_conformance.json
//! ```

fn main() {
    let fixture = awcp_core::lifecycle::conformance_fixture();
    println!("{}", serde_json::to_string_pretty(&fixture).unwrap());
}
