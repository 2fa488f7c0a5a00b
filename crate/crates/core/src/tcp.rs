//! Loopback TCP transport: worker threads speak the line protocol to a
//! master loop driven by the wall clock.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::distribution::wire::{self, Message};
use crate::distribution::{handle_assignment, DistributionError, Envelope, Master, WorkerId};
use crate::experiment::ConfigError;
use crate::fitness::{Evaluation, FitnessId};
use crate::ga::EvaluationProvider;
use crate::moo::{DecisionVector, Problem, WeightVector};
use crate::sim::SimConfig;

fn transport_err(e: impl std::fmt::Display) -> DistributionError {
    DistributionError::Transport(e.to_string())
}

fn write_line(stream: &mut TcpStream, message: &Message) -> std::io::Result<()> {
    let mut line = wire::encode(message);
    line.push('\n');
    stream.write_all(line.as_bytes())
}

/// Worker loop: register, then answer every assignment until the master
/// closes the connection.
fn worker_main(id: WorkerId, addr: std::net::SocketAddr, problem: Problem, weights: WeightVector) {
    let Ok(mut stream) = TcpStream::connect(addr) else {
        return;
    };
    if write_line(&mut stream, &Message::Register { worker_id: id.to_string() }).is_err() {
        return;
    }
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    for line in BufReader::new(read_half).lines() {
        let Ok(line) = line else { break };
        let Ok(message) = wire::decode(&line) else { break };
        if let Some(reply) = handle_assignment(id, &message, &problem, &weights) {
            if write_line(&mut stream, &reply).is_err() {
                break;
            }
        }
    }
}

/// Evaluation provider over loopback sockets with one thread per worker and
/// one reader thread per connection.
pub struct TcpCluster {
    config: SimConfig,
    master: Master,
    inbound: Receiver<String>,
    streams: BTreeMap<WorkerId, TcpStream>,
    threads: Vec<JoinHandle<()>>,
    started: Instant,
    fitness: Option<FitnessId>,
    last_completion_ms: u64,
}

impl std::fmt::Debug for TcpCluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpCluster")
            .field("master", &self.master)
            .field("workers", &self.streams.len())
            .finish()
    }
}

impl TcpCluster {
    /// Spawns `config.workers` workers and waits for all to register.
    /// Injected faults are a simulator feature and are refused here.
    pub fn start(
        config: &SimConfig,
        mut master: Master,
        problem: &Problem,
        weights: &WeightVector,
    ) -> crate::Result<Self> {
        config.validate()?;
        if !config.faults.is_empty() {
            return Err(ConfigError::Invalid("fault injection requires the sim transport".into()).into());
        }
        let listener = TcpListener::bind("127.0.0.1:0").map_err(transport_err)?;
        let addr = listener.local_addr().map_err(transport_err)?;
        let mut threads = Vec::new();
        for i in 1..=config.workers {
            let (p, w) = (problem.clone(), weights.clone());
            threads.push(std::thread::spawn(move || worker_main(WorkerId(i), addr, p, w)));
        }

        let started = Instant::now();
        let (tx, inbound): (Sender<String>, Receiver<String>) = mpsc::channel();
        let mut streams = BTreeMap::new();
        for _ in 0..config.workers {
            let (stream, _) = listener.accept().map_err(transport_err)?;
            let mut reader = BufReader::new(stream.try_clone().map_err(transport_err)?);
            let mut first = String::new();
            reader.read_line(&mut first).map_err(transport_err)?;
            let message = wire::decode(first.trim_end())?;
            let Message::Register { worker_id } = &message else {
                return Err(DistributionError::Wire("expected REGISTER".into()).into());
            };
            let id: WorkerId = worker_id.parse()?;
            master.handle(message, started.elapsed().as_millis() as u64)?;
            streams.insert(id, stream);
            let tx = tx.clone();
            threads.push(std::thread::spawn(move || {
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            }));
        }
        Ok(Self {
            config: config.clone(),
            master,
            inbound,
            streams,
            threads,
            started,
            fitness: None,
            last_completion_ms: 0,
        })
    }

    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    pub fn last_completion_ms(&self) -> u64 {
        self.last_completion_ms
    }

    pub fn select_fitness(&mut self, problem: &Problem) -> crate::Result<FitnessId> {
        let id = self.master.select_fitness(problem, self.now_ms())?;
        self.fitness = Some(id);
        Ok(id)
    }

    fn send(&mut self, envelopes: Vec<Envelope>) -> crate::Result<()> {
        for env in envelopes {
            let stream = self
                .streams
                .get_mut(&env.to)
                .ok_or_else(|| transport_err(format!("no connection for {}", env.to)))?;
            write_line(stream, &env.message).map_err(transport_err)?;
        }
        Ok(())
    }

    /// Closes every connection and joins the threads.
    pub fn shutdown(mut self) -> crate::Result<Master> {
        for stream in self.streams.values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        self.streams.clear();
        for t in self.threads.drain(..) {
            t.join().map_err(|_| transport_err("worker thread panicked"))?;
        }
        Ok(self.master)
    }
}

impl EvaluationProvider for TcpCluster {
    fn evaluate_batch(
        &mut self,
        generation: u32,
        genomes: &[DecisionVector],
        problem: &Problem,
        _weights: &WeightVector,
    ) -> crate::Result<Vec<Evaluation>> {
        let fitness = match self.fitness {
            Some(f) => f,
            None => self.select_fitness(problem)?,
        };
        let slices = self.config.slices(genomes.len());
        let timing = self.config.timing(genomes.len());
        let now = self.now_ms();
        self.master.begin_batch(generation, genomes, fitness, slices, timing, now)?;
        let out = self.master.dispatch(now);
        self.send(out)?;
        let interval = Duration::from_millis((timing.job_timeout_ms / 4).max(1));
        let mut next_tick = Instant::now() + interval;
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            match self.inbound.recv_timeout(wait) {
                Ok(line) => {
                    let now = self.now_ms();
                    let out = self.master.handle(wire::decode(&line)?, now)?;
                    self.send(out)?;
                    let out = self.master.dispatch(now);
                    self.send(out)?;
                    if self.master.batch_complete() {
                        self.last_completion_ms = now;
                        return self.master.finish_batch(now);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    let now = self.now_ms();
                    let (_, out) = self.master.watchdog_tick(now)?;
                    self.send(out)?;
                    let out = self.master.dispatch(now);
                    self.send(out)?;
                    next_tick = Instant::now() + interval;
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(transport_err("all worker connections closed").into());
                }
            }
            if self.master.stranded() {
                return Err(DistributionError::AllWorkersSuspended {
                    queued: self.master.table().queue_len(),
                }
                .into());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ga::LocalEvaluator;
    use crate::moo::builtin_problem;
    use crate::persistence::MemoryStore;
    use crate::reasoning::{FixedRules, RuleBook};
    use std::sync::Arc;

    #[test]
    fn tcp_batch_matches_local_evaluation() {
        let problem = builtin_problem("sphere-3").unwrap();
        let weights = WeightVector::uniform(1);
        let master = Master::new(
            "tcp",
            Arc::new(RuleBook::new(FixedRules::defaults())),
            Box::new(MemoryStore::new()),
        );
        let config = SimConfig { workers: 3, ..SimConfig::default() };
        let mut cluster = TcpCluster::start(&config, master, &problem, &weights).unwrap();
        let genomes: Vec<DecisionVector> = (0..10)
            .map(|i| DecisionVector::new(vec![i as f64 * 0.5, -1.0, 2.0]).unwrap())
            .collect();
        let got = cluster.evaluate_batch(0, &genomes, &problem, &weights).unwrap();
        let want = LocalEvaluator::new(cluster.fitness.unwrap())
            .evaluate_batch(0, &genomes, &problem, &weights)
            .unwrap();
        assert_eq!(got, want);
        let mut master = cluster.shutdown().unwrap();
        assert_eq!(master.store_mut().record_count(), 10);
    }

    #[test]
    fn tcp_refuses_faults() {
        let problem = builtin_problem("sphere-2").unwrap();
        let master = Master::new(
            "tcp",
            Arc::new(RuleBook::new(FixedRules::defaults())),
            Box::new(MemoryStore::new()),
        );
        let config = SimConfig {
            workers: 2,
            faults: vec![crate::sim::Fault::stall_on(1, 1)],
            ..SimConfig::default()
        };
        let err = TcpCluster::start(&config, master, &problem, &WeightVector::uniform(1)).unwrap_err();
        assert!(err.is_config_error());
    }
}
