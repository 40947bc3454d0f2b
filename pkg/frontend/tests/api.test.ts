import { describe, expect, it } from "vitest";

import {
  artifactUrl,
  createClient,
  fetchArtifactText,
  getJob,
  pollJob,
  submitJob,
  ValidationError,
} from "../src/api.js";
import { createMockFetch } from "../src/mockService.js";
import type { EditRequestFields, JobStateResponse } from "../src/types.js";

const FIELDS: EditRequestFields = {
  inversion_prompt: "A photo of cat",
  editing_prompt: "A running cat",
  object_word: "cat",
  bbox: [0.25, 0.0, 0.75, 0.5],
};

const IMG = new Blob([new Uint8Array([1, 2, 3])], { type: "image/png" });
const noSleep = () => Promise.resolve();

describe("submit/poll loop against the mock service", () => {
  it("submits, polls through queued/running and resolves done", async () => {
    const client = createClient("", createMockFetch({
      script: { states: ["queued", "running", "running", "done"] },
    }));
    const { id } = await submitJob(client, IMG, FIELDS);
    expect(id).toMatch(/^mock-/);

    const seen: string[] = [];
    const job = await pollJob(client, id, {
      sleep: noSleep,
      onUpdate: (j: JobStateResponse) => seen.push(j.state),
    });
    expect(job.state).toBe("done");
    expect(seen).toEqual(["queued", "running", "running", "done"]);
    expect(job.artifacts).toContain("edited.png");
  });

  it("failed jobs surface their error text", async () => {
    const client = createClient("", createMockFetch({
      script: { states: ["queued", "failed"], error: "no source region found" },
    }));
    const { id } = await submitJob(client, IMG, FIELDS);
    const job = await pollJob(client, id, { sleep: noSleep });
    expect(job.state).toBe("failed");
    expect(job.error).toBe("no source region found");
  });

  it("400 responses raise field-level validation errors", async () => {
    const client = createClient("", createMockFetch({
      script: { states: ["done"], rejectField: "bbox", rejectMessage: "degenerate box" },
    }));
    await expect(submitJob(client, IMG, FIELDS)).rejects.toThrowError(ValidationError);
    try {
      await submitJob(client, IMG, FIELDS);
    } catch (err) {
      expect((err as ValidationError).field).toBe("bbox");
      expect((err as ValidationError).message).toBe("degenerate box");
    }
  });

  it("the mock enforces the object-word-in-prompt rule like the real service", async () => {
    const client = createClient("", createMockFetch());
    const bad = { ...FIELDS, object_word: "dog" };
    await expect(submitJob(client, IMG, bad)).rejects.toMatchObject({ field: "object_word" });
  });

  it("network failures trigger the banner callback and are retried", async () => {
    const client = createClient("", createMockFetch({
      script: { states: ["queued", "running", "done"] },
      networkFailuresAt: [2],
    }));
    const { id } = await submitJob(client, IMG, FIELDS);
    const bannerEvents: number[] = [];
    const job = await pollJob(client, id, {
      sleep: noSleep,
      onNetworkError: (_err, attempt) => bannerEvents.push(attempt),
    });
    expect(job.state).toBe("done");
    expect(bannerEvents).toEqual([1]);
  });

  it("gives up after exhausting network retries", async () => {
    const client = createClient("", createMockFetch({
      script: { states: ["queued", "queued", "queued", "queued", "queued"] },
      networkFailuresAt: [1, 2, 3, 4, 5],
    }));
    const { id } = await submitJob(client, IMG, FIELDS);
    await expect(
      pollJob(client, id, { sleep: noSleep, maxNetworkRetries: 3 }),
    ).rejects.toThrow(/NetworkError/);
  });

  it("unknown jobs propagate immediately", async () => {
    const client = createClient("", createMockFetch());
    await expect(getJob(client, "nope")).rejects.toThrow(/unknown job/);
    await expect(pollJob(client, "nope", { sleep: noSleep })).rejects.toThrow(/unknown job/);
  });
});

describe("artifacts", () => {
  it("urls embed the job id and artifact name", () => {
    const client = createClient("http://x:1");
    expect(artifactUrl(client, "abc", "edited.png")).toBe("http://x:1/jobs/abc/artifacts/edited.png");
    expect(artifactUrl(client, "abc", "masks/target.png")).toBe(
      "http://x:1/jobs/abc/artifacts/masks/target.png",
    );
  });

  it("loss log text is fetchable once done", async () => {
    const client = createClient("", createMockFetch({ script: { states: ["done"] } }));
    const { id } = await submitJob(client, IMG, FIELDS);
    await pollJob(client, id, { sleep: noSleep });
    const csv = await fetchArtifactText(client, id, "loss_log.csv");
    expect(csv.split("\n")[0]).toBe("iteration,l_in,l_out,l_oii,l_sai,l_bg,l_total,alpha_i");
  });

  it("artifacts 409 while the job is still queued or running", async () => {
    const fetchImpl = createMockFetch({ script: { states: ["queued", "running", "done"] } });
    const client = createClient("", fetchImpl);
    const { id } = await submitJob(client, IMG, FIELDS);
    const resp = await fetchImpl(`/jobs/${id}/artifacts/edited.png`);
    expect(resp.status).toBe(409);
  });
});
