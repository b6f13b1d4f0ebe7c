//! The pending-request table on its own: first response wins, late and
//! repeated answers are dropped, deadlines fire once.

use std::sync::Arc;
use std::time::Duration;

use ftproxy::clock::{Clock, ManualClock};
use ftproxy::envelope::{ReplicaId, RequestId, ResponseEnvelope, ResponseStatus};
use ftproxy::registry::Registry;

fn response(id: RequestId, replica: u64) -> ResponseEnvelope {
    ResponseEnvelope {
        request_id: id,
        replica_id: ReplicaId(replica),
        status: ResponseStatus::Ok,
        payload: vec![],
    }
}

fn main() {
    let clock = Arc::new(ManualClock::new());
    let registry = Registry::with_retention(clock.clone(), Duration::from_secs(60));
    let ms = Duration::from_millis;

    let a = RequestId::new(7, 1);
    let b = RequestId::new(7, 2);
    for id in [a, b] {
        registry
            .register(
                id,
                ms(100),
                Box::new(move |r| println!("{id}: response from {}", r.replica_id)),
                Box::new(move |r| println!("{id}: timed out ({:?}, {} bytes)", r.status, r.payload.len())),
            )
            .unwrap();
    }
    println!("second register of {a}: {:?}", registry.register(a, ms(100), Box::new(|_| {}), Box::new(|_| {})).err());

    println!("{a} from r2 -> {:?}", registry.complete(response(a, 2)));
    println!("{a} from r1 -> {:?}", registry.complete(response(a, 1)));

    println!("expire(99ms) -> {:?}", registry.expire(ms(99)));
    clock.set(ms(100));
    println!("expire(100ms) -> {:?}", registry.expire(clock.now()));
    println!("late {b} -> {:?}", registry.complete(response(b, 1)));
    println!("never-seen id -> {:?}", registry.complete(response(RequestId::new(9, 9), 1)));

    clock.set(Duration::from_secs(61));
    registry.expire(clock.now());
    println!("after retention: pending {} tombstones {}", registry.pending(), registry.tombstones());
    println!("{:?}", registry.stats());
}
