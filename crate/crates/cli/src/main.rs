use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use modsel_cli::commands::{self, Cli, Command, ServeArgs};
use modsel_cli::server;
use tracing_subscriber::EnvFilter;

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::TrainSeg(args) => commands::train_seg_cmd(&args),
        Command::TrainRl(args) => commands::train_rl_cmd(&args),
        Command::Eval(args) => {
            let csv = commands::eval_cmd(&args)?;
            if args.out.is_none() {
                print!("{csv}");
            }
            Ok(())
        }
        Command::RunExperiment(args) => {
            let report = commands::run_experiment_cmd(&args)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Serve(args) => serve(args),
    }
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let store = Arc::new(commands::session_store(&args)?);
    let addr = format!("{}:{}", args.host, args.port);
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, "serving sessions");
        axum::serve(listener, server::router(store)).await?;
        Ok(())
    })
}
