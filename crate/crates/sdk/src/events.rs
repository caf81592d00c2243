//! Per-delegation event buffers behind the executor's SSE streams.
//!
//! Each delegation owns one channel with a strictly increasing id sequence.
//! Events stay buffered (capped) so a reconnecting subscriber can replay
//! everything after its `Last-Event-ID`; publishing a terminal event closes
//! the channel, which ends every stream once it has drained the buffer.

use crate::sse::encode_frame;
use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use tokio::sync::watch;

/// Replay buffer size per delegation. A subscriber that falls further behind
/// than this loses the oldest events.
pub const EVENT_BUFFER_CAP: usize = 256;

/// Snapshot event payloads larger than this travel by reference: the SSE
/// data carries only the snapshot id and subscribers fetch the full
/// descriptor over HTTP.
pub const SNAPSHOT_INLINE_LIMIT: usize = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventName {
    Status,
    Snapshot,
    Done,
    Error,
}

impl EventName {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventName::Status => "status",
            EventName::Snapshot => "snapshot",
            EventName::Done => "done",
            EventName::Error => "error",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoredEvent {
    pub id: u64,
    pub name: EventName,
    pub data: String,
}

impl StoredEvent {
    pub fn encode(&self) -> String {
        encode_frame(self.id, self.name.as_str(), &self.data)
    }
}

#[derive(Debug)]
struct ChannelState {
    next_id: u64,
    buffer: VecDeque<StoredEvent>,
    closed: bool,
    /// Full descriptor JSON for snapshots that travel by reference.
    snapshots: HashMap<String, String>,
}

#[derive(Debug)]
pub struct Channel {
    state: Mutex<ChannelState>,
    bump: watch::Sender<u64>,
}

impl Channel {
    fn new() -> Self {
        Channel {
            state: Mutex::new(ChannelState {
                next_id: 1,
                buffer: VecDeque::new(),
                closed: false,
                snapshots: HashMap::new(),
            }),
            bump: watch::Sender::new(0),
        }
    }

    /// Append one event; returns its id. Publishing to a closed channel is
    /// rejected so nothing can follow a terminal event.
    pub fn publish(&self, name: EventName, data: String) -> Option<u64> {
        let mut st = self.state.lock().expect("channel lock");
        if st.closed {
            return None;
        }
        let id = st.next_id;
        st.next_id += 1;
        st.buffer.push_back(StoredEvent { id, name, data });
        if st.buffer.len() > EVENT_BUFFER_CAP {
            st.buffer.pop_front();
        }
        drop(st);
        let _ = self.bump.send(id);
        Some(id)
    }

    /// Publish a snapshot event, spilling oversized payloads to the
    /// by-reference store.
    pub fn publish_snapshot(&self, snapshot_id: &str, descriptor_json: String) -> Option<u64> {
        if descriptor_json.len() > SNAPSHOT_INLINE_LIMIT {
            let data = format!("{{\"byReference\":true,\"snapshotId\":\"{snapshot_id}\"}}");
            {
                let mut st = self.state.lock().expect("channel lock");
                st.snapshots.insert(snapshot_id.to_string(), descriptor_json);
            }
            self.publish(EventName::Snapshot, data)
        } else {
            self.publish(EventName::Snapshot, descriptor_json)
        }
    }

    pub fn snapshot_json(&self, snapshot_id: &str) -> Option<String> {
        self.state.lock().expect("channel lock").snapshots.get(snapshot_id).cloned()
    }

    /// No further events will be published; streams end once drained.
    pub fn close(&self) {
        let mut st = self.state.lock().expect("channel lock");
        st.closed = true;
        drop(st);
        self.bump.send_modify(|_| {});
    }

    fn collect_after(&self, cursor: u64) -> (Vec<StoredEvent>, bool) {
        let st = self.state.lock().expect("channel lock");
        let events = st.buffer.iter().filter(|e| e.id > cursor).cloned().collect();
        (events, st.closed)
    }

    /// Events with id greater than `cursor`, waiting if none are buffered
    /// yet. `None` means the channel closed and everything was delivered.
    pub async fn next_after(&self, cursor: u64) -> Option<Vec<StoredEvent>> {
        let mut rx = self.bump.subscribe();
        loop {
            let (events, closed) = self.collect_after(cursor);
            if !events.is_empty() {
                return Some(events);
            }
            if closed {
                return None;
            }
            // A publish between collect_after and here still wakes this
            // subscriber: changed() reports any version newer than the one
            // subscribe() observed.
            if rx.changed().await.is_err() {
                return None;
            }
        }
    }
}

/// Registry of channels, one per delegation.
#[derive(Debug, Default)]
pub struct EventHub {
    channels: Mutex<HashMap<String, Arc<Channel>>>,
}

impl EventHub {
    pub fn new() -> Self {
        EventHub::default()
    }

    pub fn open(&self, delegation_id: &str) -> Arc<Channel> {
        let mut map = self.channels.lock().expect("hub lock");
        map.entry(delegation_id.to_string()).or_insert_with(|| Arc::new(Channel::new())).clone()
    }

    pub fn get(&self, delegation_id: &str) -> Option<Arc<Channel>> {
        self.channels.lock().expect("hub lock").get(delegation_id).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn ids_increase_and_replay_is_ordered() {
        let hub = EventHub::new();
        let ch = hub.open("d-1");
        assert_eq!(ch.publish(EventName::Status, "{\"state\":\"running\"}".into()), Some(1));
        assert_eq!(ch.publish(EventName::Status, "{\"n\":2}".into()), Some(2));
        assert_eq!(ch.publish(EventName::Done, "{}".into()), Some(3));

        let events = ch.next_after(0).await.unwrap();
        let ids: Vec<u64> = events.iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[tokio::test]
    async fn last_event_id_filters_replay() {
        let hub = EventHub::new();
        let ch = hub.open("d-2");
        for n in 0..5 {
            ch.publish(EventName::Status, format!("{{\"n\":{n}}}"));
        }
        let events = ch.next_after(3).await.unwrap();
        let ids: Vec<u64> = events.iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![4, 5]);
    }

    #[tokio::test]
    async fn closed_channel_drains_then_ends() {
        let hub = EventHub::new();
        let ch = hub.open("d-3");
        ch.publish(EventName::Done, "{}".into());
        ch.close();
        assert!(ch.publish(EventName::Status, "{}".into()).is_none(), "closed accepts nothing");

        let events = ch.next_after(0).await.unwrap();
        assert_eq!(events.len(), 1);
        assert!(ch.next_after(1).await.is_none(), "drained closed channel must end");
    }

    #[tokio::test]
    async fn waiting_subscriber_wakes_on_publish() {
        let hub = EventHub::new();
        let ch = hub.open("d-4");
        let waiter = {
            let ch = ch.clone();
            tokio::spawn(async move { ch.next_after(0).await })
        };
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        ch.publish(EventName::Status, "{}".into());
        let events = waiter.await.unwrap().unwrap();
        assert_eq!(events[0].id, 1);
    }

    #[tokio::test]
    async fn buffer_cap_drops_oldest() {
        let hub = EventHub::new();
        let ch = hub.open("d-5");
        for n in 0..(EVENT_BUFFER_CAP + 10) {
            ch.publish(EventName::Status, format!("{{\"n\":{n}}}"));
        }
        let events = ch.next_after(0).await.unwrap();
        assert_eq!(events.len(), EVENT_BUFFER_CAP);
        assert_eq!(events[0].id, 11);
    }

    #[tokio::test]
    async fn oversized_snapshots_travel_by_reference() {
        let hub = EventHub::new();
        let ch = hub.open("d-6");
        let big = format!("{{\"data\":\"{}\"}}", "x".repeat(SNAPSHOT_INLINE_LIMIT + 1));
        ch.publish_snapshot("s-1", big.clone());
        let events = ch.next_after(0).await.unwrap();
        assert_eq!(events[0].data, "{\"byReference\":true,\"snapshotId\":\"s-1\"}");
        assert_eq!(ch.snapshot_json("s-1").unwrap(), big);

        let small = "{\"snapshotId\":\"s-2\"}".to_string();
        ch.publish_snapshot("s-2", small.clone());
        let events = ch.next_after(1).await.unwrap();
        assert_eq!(events[0].data, small);
    }
}
