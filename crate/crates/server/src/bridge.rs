use std::sync::mpsc::{Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use coach_core::dialogue::{ChannelPoll, CoacheeChannel, CoacheeTurnInput, SessionEvent, UtteranceSource};
use tokio::sync::mpsc::UnboundedSender;

/// Turn the session is waiting on and when the prompt went out.
pub(crate) type AwaitingSlot = Arc<Mutex<Option<(usize, Instant)>>>;

/// Session side of a socket: events go to the socket task, answers come back.
pub(crate) struct SocketChannel {
    pub(crate) out: UnboundedSender<SessionEvent>,
    pub(crate) input: Receiver<CoacheeTurnInput>,
    pub(crate) awaiting: AwaitingSlot,
    pub(crate) intro_valence: Vec<f64>,
}

impl CoacheeChannel for SocketChannel {
    fn deliver(&mut self, event: &SessionEvent) {
        {
            let mut slot = self.awaiting.lock().expect("awaiting lock");
            match event {
                SessionEvent::AwaitingInput { turn_index } => {
                    // answers that arrived for a turn already closed by timeout are stale
                    while self.input.try_recv().is_ok() {}
                    *slot = Some((*turn_index, Instant::now()));
                }
                SessionEvent::CoachUtterance { source: UtteranceSource::Reprompt, .. } => {}
                _ => *slot = None,
            }
        }
        let _ = self.out.send(event.clone());
    }

    fn poll_input(&mut self) -> ChannelPoll {
        match self.input.try_recv() {
            Ok(input) => ChannelPoll::Ready(input),
            Err(TryRecvError::Empty) => ChannelPoll::Pending,
            Err(TryRecvError::Disconnected) => ChannelPoll::Disconnected,
        }
    }

    fn intro_valence(&mut self) -> Vec<f64> {
        self.intro_valence.clone()
    }
}
