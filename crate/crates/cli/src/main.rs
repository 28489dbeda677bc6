use std::io::{self, Write};
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use crewforge::orchestrator::ConfigError;
use crewforge_cli::commands::{self, Cli, Command, Outcome, ServeArgs, UsageError};
use crewforge_cli::server::{self, AppState, Mode, ServerOptions};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();

    match dispatch(cli) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ConfigError>().is_some();
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let outcome = match &cli.command {
        Command::Run(args) => commands::run(args, &cli.sessions_dir, &mut out),
        Command::Replay { session_id } => commands::replay(session_id, &cli.sessions_dir, &mut out),
        Command::Simulate(args) => commands::simulate(args, &mut out),
        Command::Suite { config } => commands::suite(config.as_deref(), &mut out),
        Command::Serve(args) => {
            drop(out);
            return serve(args, &cli);
        }
    };
    out.flush()?;
    outcome
}

fn serve(args: &ServeArgs, cli: &Cli) -> Result<Outcome> {
    let options = ServerOptions {
        config: args.session.load_config()?,
        script: args.session.load_script()?,
        mode: if args.session.manual { Mode::Manual } else { Mode::Auto },
        sessions_dir: cli.sessions_dir.clone(),
        console_dir: args.console_dir.clone(),
    };
    let app = server::router(AppState::new(options));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(Outcome::Success)
    })
}
