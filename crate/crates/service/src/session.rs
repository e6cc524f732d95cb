use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use artireg::engine::Session;
use log::warn;
use tokio::sync::{watch, Notify};

use crate::wire::{RevisionGuard, StateSnapshot};
use crate::ApiError;

pub(crate) struct Inner {
    pub session: Session,
    /// Newest accepted client timestamp per object.
    pub last_sample: HashMap<u64, f64>,
}

/// One engine session with its snapshot channel and debounce timer.
pub(crate) struct SessionHandle {
    pub id: u64,
    inner: Mutex<Inner>,
    /// Origin of the engine's clock.
    epoch: Instant,
    events: watch::Sender<Arc<StateSnapshot>>,
    wake: Notify,
    /// Voxelized scene as little-endian f32 triples.
    pub scene_blob: axum::body::Bytes,
}

impl SessionHandle {
    /// Wraps `session` and starts its debounce task on the current runtime.
    pub fn spawn(id: u64, session: Session) -> Arc<Self> {
        let scene_blob = session.scene().to_f32_le_bytes().into();
        let (events, _) = watch::channel(Arc::new(StateSnapshot::new(id, &session)));
        let handle = Arc::new(Self {
            id,
            inner: Mutex::new(Inner {
                session,
                last_sample: HashMap::new(),
            }),
            epoch: Instant::now(),
            events,
            wake: Notify::new(),
            scene_blob,
        });
        tokio::spawn(debounce_loop(Arc::clone(&handle)));
        handle
    }

    pub fn snapshot(&self) -> Arc<StateSnapshot> {
        self.events.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Arc<StateSnapshot>> {
        self.events.subscribe()
    }

    /// Runs `f` under the session lock, publishing a snapshot if it
    /// committed anything.
    fn locked<R>(&self, guard: RevisionGuard, f: impl FnOnce(&mut Inner, Duration) -> Result<R, ApiError>) -> Result<R, ApiError> {
        let mut inner = self.inner.lock().expect("session lock");
        let before = inner.session.revision();
        if let Some(expected) = guard.expected_revision {
            if expected != before {
                return Err(ApiError::StaleRevision {
                    expected,
                    actual: before,
                });
            }
        }
        let out = f(&mut inner, self.epoch.elapsed());
        if inner.session.revision() != before {
            self.events.send_replace(Arc::new(StateSnapshot::new(self.id, &inner.session)));
            self.wake.notify_one();
        }
        out
    }

    /// Reads under the session lock.
    pub fn read<R>(&self, f: impl FnOnce(&Inner) -> R) -> R {
        f(&self.inner.lock().expect("session lock"))
    }

    /// [`SessionHandle::locked`] on the blocking pool, since fits are long.
    pub async fn mutate<R, F>(self: &Arc<Self>, guard: RevisionGuard, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Inner, Duration) -> Result<R, ApiError> + Send + 'static,
    {
        let me = Arc::clone(self);
        tokio::task::spawn_blocking(move || me.locked(guard, f))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
    }

    fn next_deadline(&self) -> Option<Instant> {
        self.read(|i| i.session.next_refit_deadline()).map(|d| self.epoch + d)
    }

    fn run_due_refits(&self) {
        let _ = self.locked(RevisionGuard::default(), |inner, now| {
            for id in inner.session.due_refits(now) {
                if let Err(e) = inner.session.maybe_refit(id, now) {
                    warn!("session {}: refit of object {id} failed: {e}", self.id);
                }
            }
            Ok(())
        });
    }
}

async fn debounce_loop(h: Arc<SessionHandle>) {
    loop {
        // Created before reading the deadline so a commit in between wakes us.
        let wake = h.wake.notified();
        match h.next_deadline() {
            Some(at) => {
                tokio::select! {
                    _ = tokio::time::sleep_until(at.into()) => {
                        let me = Arc::clone(&h);
                        let _ = tokio::task::spawn_blocking(move || me.run_due_refits()).await;
                    }
                    _ = wake => {}
                }
            }
            None => wake.await,
        }
    }
}
