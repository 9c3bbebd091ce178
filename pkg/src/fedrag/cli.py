"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 federation failure,
4 benchmark abort.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .attestation import (
    AttestationVerifier,
    AuthorizationPolicy,
    ClientAttester,
    SigningIdentity,
    measure_manifest,
)
from .embedding import EmbedderSpec
from .errors import (
    BenchmarkAbortError,
    ConfigError,
    FedRagError,
    IngestError,
    InsufficientRespondersError,
)
from .harness import (
    INDEX_FILENAME,
    ingest_corpus,
    read_question_file,
    report,
    run_benchmark,
)
from .index import load_index
from .inference import (
    BenchmarkQuestion,
    HttpChatBackend,
    HttpProviderClient,
    HttpSealedInferClient,
    PromptTemplate,
    StubGenerator,
)
from .protocol import (
    FederationServer,
    InferenceStack,
    SiloNode,
    SiloTcpServer,
    TcpServerTransport,
    load_federation_config,
    parse_address,
)
from .sim import SimConfig, build_sim

EXIT_CONFIG = 2
EXIT_FEDERATION = 3
EXIT_BENCH_ABORT = 4


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _identity_from_file(path: str) -> SigningIdentity:
    obj = _load_json(path)
    try:
        return SigningIdentity.from_private_hex(obj["key_id"], obj["private_key_hex"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad identity file {path}: {exc}") from exc


def _embed_spec(obj: dict) -> EmbedderSpec:
    try:
        return EmbedderSpec.from_json_dict(obj)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad embed_spec: {exc}") from exc


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Federated RAG orchestration over attested silos."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command()
@click.option("--key-id", required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def keygen(key_id: str, out: str) -> None:
    """Mint an identity signing key and print its public half."""
    identity = SigningIdentity.generate(key_id)
    private_hex = identity.private_key.private_bytes_raw().hex()
    Path(out).write_text(
        json.dumps({"key_id": key_id, "private_key_hex": private_hex}, indent=2) + "\n",
        encoding="utf-8",
    )
    click.echo(json.dumps({"key_id": key_id, "public_key_hex": identity.public_bytes().hex()}))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
def ingest(config_path: str, input_path: str) -> None:
    """Ingest a snippet JSONL file into a silo's local index."""
    try:
        cfg = _load_json(config_path)
        spec = _embed_spec(cfg["embed_spec"])
        report_ = ingest_corpus(
            input_path, cfg["data_dir"], spec, silo_id=cfg.get("client_id", "")
        )
    except (ConfigError, IngestError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(
        json.dumps(
            {
                "silo": report_.silo_id,
                "ingested": report_.ingested,
                "deduplicated": report_.deduplicated,
                "malformed": len(report_.malformed_lines),
                "index_size": report_.index_size,
            }
        )
    )


@main.command("serve-silo")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def serve_silo(config_path: str) -> None:
    """Run a silo node: serve attested retrieval over TCP."""
    try:
        cfg = _load_json(config_path)
        identity = _identity_from_file(cfg["identity_key"])
        manifest = _load_json(cfg["manifest"])
        announce = _load_json(cfg["server_announce"])
        index = load_index(Path(cfg["data_dir"]) / INDEX_FILENAME)
        host, port = parse_address(cfg["listen"])
    except (ConfigError, FedRagError, KeyError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    node = SiloNode(
        client_id=cfg["client_id"],
        attester=ClientAttester(identity, manifest),
        index=index,
        pinned_server_pub=bytes.fromhex(announce["identity_pub_hex"]),
        pinned_server_measurement=announce["measurement"],
    )
    server = SiloTcpServer(node, host, port)
    server.start()
    click.echo(f"silo {cfg['client_id']} listening on {server.address[0]}:{server.address[1]}")
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()


def _build_tcp_federation(cfg: dict) -> FederationServer:
    identity = _identity_from_file(cfg["identity_key"])
    manifest = _load_json(cfg["manifest"])
    policy = AuthorizationPolicy.load(cfg["policy"])
    fed_cfg = load_federation_config(cfg["federation"])
    endpoints = {
        c.client_id: parse_address(c.address) for c in fed_cfg.clients if c.address
    }
    transport = TcpServerTransport(endpoints)
    template = PromptTemplate()
    backend = (
        HttpChatBackend(cfg["backend_url"], cfg.get("backend_model", "local"))
        if cfg.get("backend_url")
        else StubGenerator(template)
    )
    stack = InferenceStack(
        template=template,
        backend=backend,
        provider=HttpProviderClient(cfg["provider_url"]) if cfg.get("provider_url") else None,
        endpoint_client=(
            HttpSealedInferClient(cfg["endpoint_url"]) if cfg.get("endpoint_url") else None
        ),
    )
    server = FederationServer(
        transport=transport,
        verifier=AttestationVerifier(policy),
        identity=identity,
        measurement=measure_manifest(manifest),
        embed_spec=_embed_spec(cfg["embed_spec"]),
        config=fed_cfg,
        inference=stack,
    )
    live = server.handshake_all()
    if not live:
        raise InsufficientRespondersError("no silo completed attestation")
    click.echo(f"sessions established: {', '.join(live)}")
    return server


@main.command("serve-server")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def serve_server(config_path: str) -> None:
    """Run the orchestrator: attest silos, then answer /query over HTTP."""
    from http.server import BaseHTTPRequestHandler, HTTPServer

    try:
        cfg = _load_json(config_path)
        server = _build_tcp_federation(cfg)
        host, port = parse_address(cfg.get("listen", "127.0.0.1:8470"))
    except (ConfigError, KeyError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except FedRagError as exc:
        click.echo(f"federation failure: {exc}", err=True)
        sys.exit(EXIT_FEDERATION)

    class QueryHandler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802 (stdlib naming)
            if self.path != "/query":
                self.send_error(404)
                return
            length = int(self.headers.get("content-length", 0))
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                question = BenchmarkQuestion(
                    qid=body.get("qid", "adhoc"),
                    question_text=body["text"],
                    options=body.get("options", {}),
                    gold_label="",
                )
                record = server.handle_query(question, body.get("mode"))
                payload = json.dumps(record.to_json_dict()).encode()
                self.send_response(200)
            except FedRagError as exc:
                payload = json.dumps({"error": type(exc).__name__, "detail": str(exc)}).encode()
                self.send_response(502)
            except (ValueError, KeyError) as exc:
                payload = json.dumps({"error": "BadRequest", "detail": str(exc)}).encode()
                self.send_response(400)
            self.send_header("content-type", "application/json")
            self.send_header("content-length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt: str, *args: object) -> None:
            logging.getLogger("fedrag.http").info(fmt, *args)

    httpd = HTTPServer((host, port), QueryHandler)
    click.echo(f"orchestrator answering queries on http://{host}:{port}/query")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        httpd.shutdown()


def _query_options(options_csv: str | None) -> dict[str, str]:
    if not options_csv:
        return {}
    labels = "ABCD"
    values = [v.strip() for v in options_csv.split(",") if v.strip()]
    return {labels[i]: v for i, v in enumerate(values)}


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--sim-config", "sim_config_path", type=click.Path(exists=True))
@click.option("--text", required=True)
@click.option("--mode", type=click.Choice(["standalone", "cascading", "confidential"]))
@click.option("--options", "options_csv", help="Comma-separated option texts (A,B,C,D order).")
def query(
    config_path: str | None,
    sim_config_path: str | None,
    text: str,
    mode: str | None,
    options_csv: str | None,
) -> None:
    """Run one query through a live or simulated federation."""
    question = BenchmarkQuestion(
        qid="cli", question_text=text, options=_query_options(options_csv), gold_label=""
    )
    try:
        server = _resolve_server(config_path, sim_config_path)
    except (ConfigError, KeyError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except FedRagError as exc:
        click.echo(f"federation failure: {exc}", err=True)
        sys.exit(EXIT_FEDERATION)
    try:
        record = server.handle_query(question, mode)
    except FedRagError as exc:
        click.echo(f"federation failure: {exc}", err=True)
        sys.exit(EXIT_FEDERATION)
    click.echo(json.dumps(record.to_json_dict(), indent=2))


def _resolve_server(config_path: str | None, sim_config_path: str | None) -> FederationServer:
    if (config_path is None) == (sim_config_path is None):
        raise ConfigError("pass exactly one of --config or --sim-config")
    if sim_config_path is not None:
        obj = _load_json(sim_config_path)
        sim_cfg = SimConfig.from_json_dict(obj, base_dir=Path(sim_config_path).parent)
        fed = build_sim(sim_cfg)
        if not fed.live_clients:
            raise InsufficientRespondersError("no silo completed attestation")
        return fed.server
    return _build_tcp_federation(_load_json(config_path))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--sim-config", "sim_config_path", type=click.Path(exists=True))
@click.option("--questions", required=True, type=click.Path(exists=True))
@click.option(
    "--mode",
    default="all",
    type=click.Choice(["standalone", "cascading", "confidential", "all"]),
)
@click.option("--dataset", default=None, help="Dataset name for the report (default: file stem).")
@click.option("--out", type=click.Path(dir_okay=False), help="Write run JSON here.")
def bench(
    config_path: str | None,
    sim_config_path: str | None,
    questions: str,
    mode: str,
    dataset: str | None,
    out: str | None,
) -> None:
    """Run a question set through the federation and print a mode table."""
    dataset = dataset or Path(questions).stem
    modes = list(("standalone", "cascading", "confidential") if mode == "all" else (mode,))
    try:
        question_list = read_question_file(questions)
        server = _resolve_server(config_path, sim_config_path)
    except (ConfigError, IngestError, KeyError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except FedRagError as exc:
        click.echo(f"federation failure: {exc}", err=True)
        sys.exit(EXIT_FEDERATION)

    runs = []
    try:
        for m in modes:
            runs.append(run_benchmark(question_list, server, m, dataset_name=dataset))
    except BenchmarkAbortError as exc:
        click.echo(f"benchmark aborted: {exc}", err=True)
        sys.exit(EXIT_BENCH_ABORT)
    except InsufficientRespondersError as exc:
        click.echo(f"federation failure: {exc}", err=True)
        sys.exit(EXIT_FEDERATION)

    click.echo(report(runs), nl=False)
    if out:
        Path(out).write_text(
            json.dumps([r.to_json_dict() for r in runs], indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
