//! Lease negotiation and expiry arithmetic.
//!
//! Negotiation never widens what the delegator proposed: the TTL can only
//! shrink to the executor's cap, and the mode can only fall from read-write
//! to read-only. Both sides run the same pure function, so the executor can
//! later recompute the cap and reject a START that exceeds it.

use crate::error::{ErrorCode, ProtocolError};
use crate::message::{ActiveLease, ExecutorConstraints, LeaseConfig, LeaseMode};
use chrono::{DateTime, Duration, Utc};

/// Clamp proposed lease terms to the executor's constraints.
///
/// Fails only when the constraints admit no mode at all; everything else
/// resolves by narrowing.
pub fn negotiate_lease(
    proposed: &LeaseConfig,
    constraints: &ExecutorConstraints,
) -> Result<LeaseConfig, ProtocolError> {
    let mode = if constraints.allowed_modes.contains(&proposed.mode) {
        proposed.mode
    } else if proposed.mode == LeaseMode::ReadWrite
        && constraints.allowed_modes.contains(&LeaseMode::ReadOnly)
    {
        // The one permitted downgrade. Never upgrade a read-only proposal.
        LeaseMode::ReadOnly
    } else {
        return Err(ProtocolError::new(
            ErrorCode::Declined,
            format!("executor allows no acceptable lease mode for {}", proposed.mode),
        ));
    };
    Ok(LeaseConfig {
        ttl_seconds: proposed.ttl_seconds.min(constraints.max_ttl_seconds),
        mode,
    })
}

/// Anchor negotiated terms to the clock. Saturates far-future TTLs instead
/// of overflowing chrono's representable range.
pub fn activate_lease(negotiated: &LeaseConfig, now: DateTime<Utc>) -> ActiveLease {
    let secs = negotiated.ttl_seconds.min(i64::MAX as u64) as i64;
    let ttl = Duration::try_seconds(secs).unwrap_or(Duration::MAX);
    ActiveLease {
        expires_at: now.checked_add_signed(ttl).unwrap_or(DateTime::<Utc>::MAX_UTC),
        mode: negotiated.mode,
    }
}

/// Strictly past the expiry instant. At the exact instant the lease still
/// holds.
pub fn is_expired(lease: &ActiveLease, now: DateTime<Utc>) -> bool {
    now > lease.expires_at
}

/// Whole seconds left on the lease, zero once expired. Sub-second remainders
/// round up so a lease with 300ms left still reports one second.
pub fn remaining_seconds(lease: &ActiveLease, now: DateTime<Utc>) -> u64 {
    let left = lease.expires_at - now;
    if left <= Duration::zero() {
        return 0;
    }
    let millis = left.num_milliseconds().max(0) as u64;
    millis.div_ceil(1000)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn constraints(max_ttl: u64, modes: &[LeaseMode]) -> ExecutorConstraints {
        ExecutorConstraints { max_ttl_seconds: max_ttl, allowed_modes: modes.to_vec() }
    }

    #[test]
    fn ttl_clamps_to_the_smaller_side() {
        let proposed = LeaseConfig { ttl_seconds: 3600, mode: LeaseMode::ReadWrite };
        let got = negotiate_lease(&proposed, &constraints(600, &[LeaseMode::ReadWrite])).unwrap();
        assert_eq!(got.ttl_seconds, 600);

        let proposed = LeaseConfig { ttl_seconds: 120, mode: LeaseMode::ReadWrite };
        let got = negotiate_lease(&proposed, &constraints(600, &[LeaseMode::ReadWrite])).unwrap();
        assert_eq!(got.ttl_seconds, 120);
    }

    #[test]
    fn read_write_downgrades_when_not_allowed() {
        let proposed = LeaseConfig { ttl_seconds: 60, mode: LeaseMode::ReadWrite };
        let got = negotiate_lease(&proposed, &constraints(60, &[LeaseMode::ReadOnly])).unwrap();
        assert_eq!(got.mode, LeaseMode::ReadOnly);
    }

    #[test]
    fn read_only_is_never_upgraded() {
        // Executor permits read-write only; a read-only proposal must fail
        // rather than silently gain write access.
        let proposed = LeaseConfig { ttl_seconds: 60, mode: LeaseMode::ReadOnly };
        let err = negotiate_lease(&proposed, &constraints(60, &[LeaseMode::ReadWrite])).unwrap_err();
        assert_eq!(err.code, ErrorCode::Declined);
    }

    #[test]
    fn empty_mode_list_is_a_refusal() {
        let proposed = LeaseConfig { ttl_seconds: 60, mode: LeaseMode::ReadWrite };
        assert!(negotiate_lease(&proposed, &constraints(60, &[])).is_err());
    }

    #[test]
    fn expiry_boundary_is_strict() {
        let at = Utc.with_ymd_and_hms(2026, 5, 1, 12, 0, 0).unwrap();
        let lease = ActiveLease { expires_at: at, mode: LeaseMode::ReadOnly };
        assert!(!is_expired(&lease, at));
        assert!(!is_expired(&lease, at - Duration::seconds(1)));
        assert!(is_expired(&lease, at + Duration::milliseconds(1)));
    }

    #[test]
    fn remaining_rounds_up_and_floors_at_zero() {
        let at = Utc.with_ymd_and_hms(2026, 5, 1, 12, 0, 0).unwrap();
        let lease = ActiveLease { expires_at: at, mode: LeaseMode::ReadOnly };
        assert_eq!(remaining_seconds(&lease, at - Duration::milliseconds(300)), 1);
        assert_eq!(remaining_seconds(&lease, at - Duration::seconds(90)), 90);
        assert_eq!(remaining_seconds(&lease, at), 0);
        assert_eq!(remaining_seconds(&lease, at + Duration::seconds(5)), 0);
    }

    #[test]
    fn activation_saturates_absurd_ttls() {
        let now = Utc::now();
        let lease = activate_lease(
            &LeaseConfig { ttl_seconds: u64::MAX, mode: LeaseMode::ReadOnly },
            now,
        );
        assert!(lease.expires_at > now + Duration::days(365 * 100));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_mode() -> impl Strategy<Value = LeaseMode> {
            prop_oneof![Just(LeaseMode::ReadOnly), Just(LeaseMode::ReadWrite)]
        }

        fn mode_rank(m: LeaseMode) -> u8 {
            match m {
                LeaseMode::ReadOnly => 0,
                LeaseMode::ReadWrite => 1,
            }
        }

        proptest! {
            // Negotiation may only narrow: resulting terms sit inside both
            // the proposal and the constraints, and repeating the
            // negotiation against the same constraints changes nothing.
            #[test]
            fn negotiation_narrows_and_is_idempotent(
                ttl in 1u64..10_000_000,
                max_ttl in 1u64..10_000_000,
                mode in arb_mode(),
                allowed in prop::collection::vec(arb_mode(), 0..3),
            ) {
                let proposed = LeaseConfig { ttl_seconds: ttl, mode };
                let cons = ExecutorConstraints { max_ttl_seconds: max_ttl, allowed_modes: allowed };
                match negotiate_lease(&proposed, &cons) {
                    Ok(got) => {
                        prop_assert!(got.ttl_seconds <= proposed.ttl_seconds);
                        prop_assert!(got.ttl_seconds <= cons.max_ttl_seconds);
                        prop_assert!(mode_rank(got.mode) <= mode_rank(proposed.mode));
                        prop_assert!(cons.allowed_modes.contains(&got.mode));
                        let again = negotiate_lease(&got, &cons).unwrap();
                        prop_assert_eq!(again, got);
                    }
                    Err(err) => {
                        // Refusal happens exactly when no permitted mode fits.
                        let fits = cons.allowed_modes.contains(&proposed.mode)
                            || (proposed.mode == LeaseMode::ReadWrite
                                && cons.allowed_modes.contains(&LeaseMode::ReadOnly));
                        prop_assert!(!fits);
                        prop_assert_eq!(err.code, ErrorCode::Declined);
                    }
                }
            }
        }
    }
}
