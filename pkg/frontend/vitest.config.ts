import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["test/**/*.test.ts"],
    // live_loop drives a real refinement job through the service
    testTimeout: 120_000,
    hookTimeout: 120_000,
    pool: "forks",
  },
});
