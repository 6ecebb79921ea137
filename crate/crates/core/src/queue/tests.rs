use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Barrier};

use proptest::prelude::*;

use super::*;
use crate::clock::{Clock, ManualClock};

fn key(challenge: &str) -> RoutingKey {
    RoutingKey {
        challenge_id: challenge.into(),
        pool: Pool::Local,
    }
}

fn broker(clock: &ManualClock) -> Broker {
    Broker::new(Arc::new(clock.clone()), BrokerConfig::default())
}

fn msg(clock: &ManualClock, k: &RoutingKey, sub: &str) -> QueueMessage {
    QueueMessage::new(k.clone(), sub.into(), clock.now())
}

fn vis() -> Duration {
    Duration::seconds(300)
}

#[test]
fn publish_is_visible_only_on_its_route() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let c1 = key("C1");
    let c2 = key("C2");
    let c1_remote = RoutingKey {
        pool: Pool::Remote,
        ..c1.clone()
    };
    for k in [&c1, &c2, &c1_remote] {
        b.declare(k.clone()).unwrap();
    }
    b.publish(msg(&clock, &c1, "S1")).unwrap();
    let w = WorkerId::from("w");
    assert!(b.lease(&c2, &w, vis()).unwrap().is_none());
    assert!(b.lease(&c1_remote, &w, vis()).unwrap().is_none());
    let (m, _) = b.lease(&c1, &w, vis()).unwrap().unwrap();
    assert_eq!(m.submission_id.as_str(), "S1");
}

#[test]
fn duplicate_publish_is_idempotent() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    let m = msg(&clock, &k, "S");
    b.publish(m.clone()).unwrap();
    b.publish(m.clone()).unwrap();
    assert_eq!(b.depth(&k), 1);
    // Still a no-op after the original has been acked.
    let (_, lease) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    b.ack(&lease).unwrap();
    b.publish(m).unwrap();
    assert_eq!(b.depth(&k), 0);
}

#[test]
fn unknown_route_is_rejected() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("nowhere");
    assert_eq!(b.publish(msg(&clock, &k, "S")), Err(QueueError::UnknownRoute(k.clone())));
    assert_eq!(b.lease(&k, &"w".into(), vis()), Err(QueueError::UnknownRoute(k)));
}

#[test]
fn hundred_messages_partition_across_ten_challenges() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let keys: Vec<_> = (0..10).map(|i| key(&format!("C{i}"))).collect();
    for k in &keys {
        b.declare(k.clone()).unwrap();
    }
    let mut expected: BTreeMap<RoutingKey, Vec<String>> = BTreeMap::new();
    for i in 0..100 {
        let k = &keys[(i * 7) % 10];
        let sub = format!("S{i}");
        expected.entry(k.clone()).or_default().push(sub.clone());
        b.publish(msg(&clock, k, &sub)).unwrap();
    }
    for k in &keys {
        let mut got = Vec::new();
        while let Some((m, lease)) = b.lease(k, &"w".into(), vis()).unwrap() {
            assert_eq!(&m.routing_key, k);
            got.push(m.submission_id.to_string());
            b.ack(&lease).unwrap();
        }
        let mut want = expected[k].clone();
        got.sort();
        want.sort();
        assert_eq!(got.len(), 10);
        assert_eq!(got, want);
    }
}

#[test]
fn empty_queue_leases_nothing() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    b.declare(key("C")).unwrap();
    assert_eq!(b.lease(&key("C"), &"w".into(), vis()).unwrap(), None);
    assert_eq!(b.lease(&key("C"), &"w".into(), Duration::zero()), Err(QueueError::InvalidVisibility));
}

#[test]
fn concurrent_leases_on_single_message_deliver_once() {
    for _ in 0..20 {
        let clock = ManualClock::epoch();
        let b = Arc::new(broker(&clock));
        let k = key("C");
        b.declare(k.clone()).unwrap();
        b.publish(msg(&clock, &k, "S")).unwrap();
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = (0..2)
            .map(|i| {
                let (b, barrier, k) = (b.clone(), barrier.clone(), k.clone());
                std::thread::spawn(move || {
                    barrier.wait();
                    b.lease(&k, &format!("w{i}").into(), vis()).unwrap().is_some() as usize
                })
            })
            .collect();
        let receipts: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(receipts, 1);
    }
}

#[test]
fn lapsed_lease_redelivers_with_next_attempt() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let (first, _) = b.lease(&k, &"w1".into(), vis()).unwrap().unwrap();
    assert_eq!(first.attempt, 1);
    assert!(b.lease(&k, &"w2".into(), vis()).unwrap().is_none());
    clock.advance(Duration::seconds(301));
    let (second, lease) = b.lease(&k, &"w2".into(), vis()).unwrap().unwrap();
    assert_eq!(second.message_id, first.message_id);
    assert_eq!(second.attempt, 2);
    assert_eq!(lease.holder.as_str(), "w2");
}

#[test]
fn acked_message_is_never_redelivered() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let (_, lease) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    b.ack(&lease).unwrap();
    clock.advance(Duration::hours(2));
    assert!(b.lease(&k, &"w".into(), vis()).unwrap().is_none());
    assert_eq!(b.ack(&lease), Err(QueueError::LeaseNotHeld(lease.message_id.clone())));
    assert_eq!(b.stats(&k), RouteStats { acked: 1, ..Default::default() });
}

#[test]
fn nack_with_requeue_redelivers_immediately() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let (_, lease) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    b.nack(&lease, true).unwrap();
    let (again, _) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    assert_eq!(again.attempt, 2);
}

#[test]
fn nack_without_requeue_waits_for_visibility() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let (_, lease) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    b.nack(&lease, false).unwrap();
    assert!(b.lease(&k, &"w".into(), vis()).unwrap().is_none());
    clock.advance(Duration::seconds(300));
    assert_eq!(b.lease(&k, &"w".into(), vis()).unwrap().unwrap().0.attempt, 2);
}

#[test]
fn ack_on_expired_lease_fails_and_message_returns() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let (_, lease) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    clock.advance(Duration::seconds(300));
    assert_eq!(b.ack(&lease), Err(QueueError::LeaseExpired(lease.message_id.clone())));
    let (again, new_lease) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    assert_eq!(again.attempt, 2);
    // The stale lease stays unusable even though the same worker re-leased.
    assert_eq!(b.ack(&lease), Err(QueueError::LeaseExpired(lease.message_id.clone())));
    b.ack(&new_lease).unwrap();
}

#[test]
fn foreign_lease_is_not_held() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let (_, lease) = b.lease(&k, &"w1".into(), vis()).unwrap().unwrap();
    let forged = Lease {
        holder: "w2".into(),
        ..lease.clone()
    };
    assert_eq!(b.ack(&forged), Err(QueueError::LeaseNotHeld(lease.message_id.clone())));
    b.ack(&lease).unwrap();
}

#[test]
fn exhausted_attempts_go_to_dead_letter_and_fire_hook() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    let fired = Arc::new(parking_lot::Mutex::new(Vec::new()));
    let sink = fired.clone();
    b.set_dead_letter_hook(Arc::new(move |d: &DeadLetter| sink.lock().push(d.clone())));
    let k = key("C");
    b.declare(k.clone()).unwrap();
    b.publish(msg(&clock, &k, "S")).unwrap();
    let mut leases = 0;
    while let Some((m, lease)) = b.lease(&k, &"w".into(), vis()).unwrap() {
        leases += 1;
        assert_eq!(m.attempt, leases);
        b.nack(&lease, true).unwrap();
    }
    assert_eq!(leases, 3);
    let dead = b.dead_letters(&"C".into());
    assert_eq!(dead.len(), 1);
    assert_eq!(dead[0].reason, DeadLetterReason::AttemptsExhausted);
    assert_eq!(fired.lock().len(), 1);

    // Lapsed leases count against the same budget.
    b.publish(msg(&clock, &k, "T")).unwrap();
    for _ in 0..3 {
        b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
        clock.advance(Duration::seconds(301));
    }
    b.reclaim_expired().unwrap();
    assert_eq!(b.dead_letters(&"C".into()).len(), 2);
    assert_eq!(fired.lock().len(), 2);
}

#[test]
fn closed_broker_is_unavailable() {
    let clock = ManualClock::epoch();
    let b = broker(&clock);
    b.declare(key("C")).unwrap();
    b.close();
    assert!(matches!(b.publish(msg(&clock, &key("C"), "S")), Err(QueueError::BrokerUnavailable(_))));
}

#[test]
fn journal_replay_restores_queue_and_leases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broker.log");
    let clock = ManualClock::epoch();
    let k = key("C");
    let (leased_id, lease) = {
        let b = Broker::open(&path, Arc::new(clock.clone()), BrokerConfig::default()).unwrap();
        b.declare(k.clone()).unwrap();
        for s in ["S1", "S2", "S3"] {
            b.publish(msg(&clock, &k, s)).unwrap();
        }
        let (_, l1) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
        b.ack(&l1).unwrap();
        let (m2, l2) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
        (m2.message_id, l2)
    };
    let b = Broker::open(&path, Arc::new(clock.clone()), BrokerConfig::default()).unwrap();
    assert_eq!(b.stats(&k), RouteStats { ready: 1, leased: 1, acked: 1, dead: 0 });
    // The lease taken before the restart is still honored.
    b.ack(&lease).unwrap();
    let (m3, _) = b.lease(&k, &"w".into(), vis()).unwrap().unwrap();
    assert_ne!(m3.message_id, leased_id);
}

#[derive(Debug, Clone)]
enum Op {
    Publish(usize),
    Lease(usize),
    Ack(usize),
    Nack(usize, bool),
    Advance(i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0usize..4).prop_map(Op::Publish),
        4 => (0usize..4).prop_map(Op::Lease),
        2 => (0usize..16).prop_map(Op::Ack),
        1 => ((0usize..16), any::<bool>()).prop_map(|(i, r)| Op::Nack(i, r)),
        1 => (1i64..400).prop_map(Op::Advance),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn isolation_conservation_and_gap_free_attempts(ops in proptest::collection::vec(op(), 1..120)) {
        let clock = ManualClock::epoch();
        let b = broker(&clock);
        let keys: Vec<_> = (0..4).map(|i| key(&format!("C{i}"))).collect();
        for k in &keys { b.declare(k.clone()).unwrap(); }
        let mut published: HashMap<MessageId, RoutingKey> = HashMap::new();
        let mut attempts_seen: HashMap<MessageId, Vec<u32>> = HashMap::new();
        let mut acked: HashMap<MessageId, ()> = HashMap::new();
        let mut leases: Vec<Lease> = Vec::new();
        let consume = |b: &Broker, k: &RoutingKey, leases: &mut Vec<Lease>, attempts_seen: &mut HashMap<MessageId, Vec<u32>>| {
            if let Some((m, lease)) = b.lease(k, &"w".into(), vis()).unwrap() {
                assert_eq!(&m.routing_key, k, "cross-route delivery");
                attempts_seen.entry(m.message_id.clone()).or_default().push(m.attempt);
                leases.push(lease);
                true
            } else { false }
        };
        for op in ops {
            match op {
                Op::Publish(i) => {
                    let m = msg(&clock, &keys[i], "S");
                    published.insert(m.message_id.clone(), keys[i].clone());
                    b.publish(m).unwrap();
                }
                Op::Lease(i) => { consume(&b, &keys[i], &mut leases, &mut attempts_seen); }
                Op::Ack(i) => if let Some(l) = leases.get(i) {
                    if b.ack(l).is_ok() { acked.insert(l.message_id.clone(), ()); }
                },
                Op::Nack(i, requeue) => if let Some(l) = leases.get(i) { let _ = b.nack(l, requeue); },
                Op::Advance(s) => clock.advance(Duration::seconds(s)),
            }
        }
        // A live consumer drains every route.
        for _ in 0..10 {
            clock.advance(Duration::seconds(301));
            for k in &keys {
                while consume(&b, k, &mut leases, &mut attempts_seen) {
                    let l = leases.last().unwrap().clone();
                    b.ack(&l).unwrap();
                    acked.insert(l.message_id.clone(), ());
                }
            }
        }
        let dead: HashMap<MessageId, ()> = keys.iter()
            .flat_map(|k| b.dead_letters(&k.challenge_id))
            .map(|d| (d.message.message_id, ()))
            .collect();
        for (id, k) in &published {
            let in_acked = acked.contains_key(id) as u32;
            let in_dead = dead.contains_key(id) as u32;
            prop_assert_eq!(in_acked + in_dead, 1, "conservation for {} on {}", id, k);
            let seen = attempts_seen.get(id).cloned().unwrap_or_default();
            prop_assert!(!seen.is_empty(), "never delivered");
            let expected: Vec<u32> = (1..=seen.len() as u32).collect();
            prop_assert_eq!(seen, expected);
        }
        for k in &keys { prop_assert_eq!(b.depth(k), 0); }
    }
}
